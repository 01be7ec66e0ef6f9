"""Command-line entry point: ``tsinterp <stage> [options]``.

Exit codes: 0 success, 2 config error, 3 missing upstream artifact,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, bundled_config_path, describe_keys
from .forecaster import HookSite
from .numerics import DivergenceError
from .pipeline import STAGES, MissingUpstream, Workdir, run_stage
from .series import DataError

EXIT_OK, EXIT_CONFIG, EXIT_UPSTREAM, EXIT_DIVERGED = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsinterp", description="SAE interpretability pipeline for a toy forecaster")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "all"):
        help_ = "run every stage in order" if name == "all" else f"run the {name} stage"
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, default=None, help="JSON config (default: bundled desk config)")
        p.add_argument("--workdir", type=Path, required=True, help="directory for artifacts")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--site", action="append", default=None,
                       help="restrict site-wise stages to this site (repeatable), e.g. enc1")
    cfg = sub.add_parser("config", help="print the bundled config or document every key")
    cfg.add_argument("--keys", action="store_true", help="list keys with defaults and descriptions")
    return ap


def load_config(path: Path | None, seed: int | None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path or bundled_config_path())
    if seed is not None:
        cfg = cfg.with_overrides(seed=seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "config":
        print(describe_keys() if args.keys else bundled_config_path().read_text(encoding="utf-8"), end="\n")
        return EXIT_OK
    try:
        cfg = load_config(args.config, args.seed)
        only = [HookSite.parse(s) for s in args.site] if args.site else None
        if only:
            mcfg = cfg.model()
            for s in only:
                s.validate(mcfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: --site: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    wd = Workdir(args.workdir)
    stages = STAGES if args.command == "all" else (args.command,)
    try:
        for name in stages:
            run_stage(name, wd, cfg, only)
    except MissingUpstream as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except DivergenceError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
