"""Pipeline stages over a working directory.

Layout::

    workdir/
      manifest.json
      data/        suite/, heldout_suite/, real.csv, data.json
      model/       model.tslm, train_log.csv, metrics.json
      acts/        <site>.train.tsac, <site>.suite.tsac, <site>.eval.tsac
      sae/         <site>.tsae, <site>.json
      taxonomy/    <site>_features.csv, <site>_summary.json, counts.csv
      ablation/    records.csv, progressive.csv, summary.csv, baselines.csv
      report/      summary.csv, taxonomy_counts.csv, progressive.svg, tables.txt
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .actstore import extract as extract_shards
from .actstore import read_shard, shard_path
from .causal import (
    AblationConfig,
    AblationHarness,
    AblationSummary,
    ablate_progressive,
    ablate_single,
    pretty_summary,
    rank_features,
    read_progressive_csv,
    summarize,
    write_progressive_csv,
    write_records_csv,
    write_summary_csv,
)
from .config import ExperimentConfig, bundled_csv_path
from .forecaster import Forecaster, HookSite, evaluate_loss, train
from .numerics import LrSchedule
from .sae import load_sae, save_sae, train_sae
from .series import Series, gen_diagnostic_suite, load_csv, load_suite, make_windows, save_suite
from .svg import write_progressive_svg
from .taxonomy import (
    TaxonomyReport,
    channel_matrix,
    classify_all,
    counts_csv,
    feature_trace,
    pretty_table,
    taxonomy_report,
    write_profiles_csv,
    write_summary_json,
)
from .tokenizer import TokenizedWindow, tokenize_window

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-model", "extract", "train-sae", "taxonomy", "ablate", "report")
HELDOUT_SEED_OFFSET = 7919


class MissingUpstream(RuntimeError):
    def __init__(self, stage: str, path: Path):
        self.stage = stage
        self.path = path
        super().__init__(f"missing {path}; run the '{stage}' stage first")


@dataclass
class Workdir:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def sub(self, name: str) -> Path:
        p = self.root / name
        p.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def model_path(self) -> Path:
        return self.root / "model" / "model.tslm"

    def sae_path(self, site: HookSite) -> Path:
        return self.root / "sae" / f"{site.short}.tsae"

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingUpstream(stage, path)
        return path


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def update_manifest(wd: Workdir, cfg: ExperimentConfig, stage: str, artifacts: list[Path], started: str) -> None:
    path = wd.root / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest["config_hash"] = cfg.config_hash()
    manifest["config"] = cfg.to_dict()
    manifest["versions"] = {"tsinterp": __version__, "numpy": np.__version__, "python": platform.python_version()}
    stages = manifest.setdefault("stages", {})
    stages[stage] = {
        "started": started,
        "finished": _now(),
        "config_hash": cfg.config_hash(),
        "artifacts": sorted(str(p.relative_to(wd.root)) for p in artifacts),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# window construction, shared by every stage
# ---------------------------------------------------------------------------


def _real_split(wd: Workdir, cfg: ExperimentConfig) -> tuple[Series, Series]:
    csv_path = wd.require(wd.data / "real.csv", "gen-data")
    real = load_csv(csv_path, cfg["data.csv_column"])
    n = len(real)
    split = int(round(n * (1 - cfg["data.csv_holdout"])))
    C = cfg["data.context_len"]
    train_part = Series(real.values[:split], "real_train")
    # holdout windows may look back into the training span for context, never for targets
    hold = Series(real.values[max(split - C, 0):], "real_holdout")
    return train_part, hold


def _tokenize(windows, cfg) -> list[TokenizedWindow]:
    tok = cfg.tokenizer()
    return [tokenize_window(w, tok) for w in windows]


def training_windows(wd: Workdir, cfg: ExperimentConfig) -> list[TokenizedWindow]:
    C, H, per = cfg["data.context_len"], cfg["data.pred_len"], cfg["data.train_windows_per_series"]
    suite = load_suite(wd.require(wd.data / "suite", "gen-data"))
    wins = []
    for i, s in enumerate(suite):
        wins += make_windows(s, C, H, max_windows=per, seed=cfg["seed"] + i)
    train_part, _ = _real_split(wd, cfg)
    wins += make_windows(train_part, C, H, max_windows=cfg["data.real_train_windows"], seed=cfg["seed"] + 10_007)
    return _tokenize(wins, cfg)


def heldout_windows(wd: Workdir, cfg: ExperimentConfig) -> list[TokenizedWindow]:
    C, H, n = cfg["data.context_len"], cfg["data.pred_len"], cfg["data.heldout_windows"]
    suite = load_suite(wd.require(wd.data / "heldout_suite", "gen-data"))
    _, hold = _real_split(wd, cfg)
    sources = suite + [hold]
    per = max(1, -(-n // len(sources)))
    wins = []
    for i, s in enumerate(sources):
        wins += make_windows(s, C, H, max_windows=per, seed=cfg["seed"] + 20_011 + i)
    return _tokenize(wins[:n], cfg)


def suite_windows(wd: Workdir, cfg: ExperimentConfig) -> tuple[list[TokenizedWindow], list[Series]]:
    C, H, per = cfg["data.context_len"], cfg["data.pred_len"], cfg["extract.windows_per_series"]
    suite = load_suite(wd.require(wd.data / "suite", "gen-data"))
    wins = []
    for i, s in enumerate(suite):
        wins += make_windows(s, C, H, max_windows=per, seed=cfg["seed"] + 30_011 + i)
    return _tokenize(wins, cfg), suite


def sae_windows(wd: Workdir, cfg: ExperimentConfig) -> list[TokenizedWindow]:
    """Suite windows plus an equal share of real-series training windows."""
    tws, suite = suite_windows(wd, cfg)
    train_part, _ = _real_split(wd, cfg)
    real = make_windows(train_part, cfg["data.context_len"], cfg["data.pred_len"],
                        max_windows=len(tws), seed=cfg["seed"] + 50_021)
    return tws + _tokenize(real, cfg)


def eval_windows(wd: Workdir, cfg: ExperimentConfig) -> list[TokenizedWindow]:
    _, hold = _real_split(wd, cfg)
    wins = make_windows(hold, cfg["data.context_len"], cfg["data.pred_len"],
                        max_windows=cfg["ablation.n_windows"], seed=cfg["seed"] + 40_009)
    return _tokenize(wins, cfg)


def _load_model(wd: Workdir) -> Forecaster:
    return Forecaster.load(wd.require(wd.model_path, "train-model"))


def _filter(sites: list[HookSite], only: list[HookSite] | None) -> list[HookSite]:
    return sites if not only else [s for s in sites if s in only]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_gen_data(wd: Workdir, cfg: ExperimentConfig, only=None) -> list[Path]:
    out = wd.sub("data")
    for name in ("suite", "heldout_suite"):
        if (out / name).exists():
            shutil.rmtree(out / name)
    n, length, noise = cfg["data.suite_per_family"], cfg["data.series_length"], cfg["data.base_noise"]
    save_suite(gen_diagnostic_suite(cfg["seed"], n, length, noise), out / "suite")
    save_suite(gen_diagnostic_suite(cfg["seed"] + HELDOUT_SEED_OFFSET, max(1, n // 4), length, noise),
               out / "heldout_suite")
    src = Path(cfg["data.csv"]) if cfg["data.csv"] else bundled_csv_path()
    load_csv(src, cfg["data.csv_column"])  # fail early on a bad file or column
    shutil.copyfile(src, out / "real.csv")
    info = {"csv_source": src.name, "csv_column": cfg["data.csv_column"]}
    (out / "data.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return [out / "suite", out / "heldout_suite", out / "real.csv", out / "data.json"]


def stage_train_model(wd: Workdir, cfg: ExperimentConfig, only=None) -> list[Path]:
    train_tws = training_windows(wd, cfg)
    held = heldout_windows(wd, cfg)
    tok = cfg.tokenizer()
    model = Forecaster(cfg.model())
    ce_init = evaluate_loss(model, held, tok.pad_id)
    sched = LrSchedule(cfg["train.lr"], cfg["train.steps"], cfg["train.warmup"])
    log.info("training on %d windows for %d steps", len(train_tws), cfg["train.steps"])
    tlog = train(model, train_tws, cfg["train.steps"], cfg["train.batch"], sched, tok.pad_id,
                 seed=cfg["seed"], clip=cfg["train.clip"], log_every=50)
    ce_final = evaluate_loss(model, held, tok.pad_id)
    out = wd.sub("model")
    model.save(out / "model.tslm")
    with (out / "train_log.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(tlog.losses, tlog.lrs)):
            w.writerow([i, repr(float(loss)), repr(float(lr))])
    metrics = {
        "heldout_ce_init": ce_init,
        "heldout_ce_final": ce_final,
        "relative_drop": 1 - ce_final / ce_init,
        "n_train_windows": len(train_tws),
        "n_heldout_windows": len(held),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    log.info("held-out CE %.4f -> %.4f", ce_init, ce_final)
    return [out / "model.tslm", out / "train_log.csv", out / "metrics.json"]


def stage_extract(wd: Workdir, cfg: ExperimentConfig, only=None) -> list[Path]:
    model = _load_model(wd)
    sites = _filter(cfg.sites("extract.sites"), only)
    pad = cfg.tokenizer().pad_id
    out = wd.sub("acts")
    tws, _ = suite_windows(wd, cfg)
    paths = extract_shards(model, sae_windows(wd, cfg), sites, out, pad, tag="train")
    paths += extract_shards(model, tws, sites, out, pad, tag="suite")
    paths += extract_shards(model, eval_windows(wd, cfg), sites, out, pad, tag="eval")
    return paths


def stage_train_sae(wd: Workdir, cfg: ExperimentConfig, only=None) -> list[Path]:
    out = wd.sub("sae")
    paths = []
    for site in _filter(cfg.sites("extract.sites"), only):
        shard = wd.require(shard_path(wd.root / "acts", site, "train"), "extract")
        scfg = cfg.sae(site)
        params, slog = train_sae(shard, scfg, site)
        save_sae(params, wd.sae_path(site), scfg)
        info = {
            "site": site.short,
            "fvu": slog.fvu,
            "active_fraction": slog.active_fraction,
            "final_mse": slog.mse[-1] if slog.mse else None,
            "dead_counts": slog.dead_counts,
            "resample_events": slog.resample_events,
        }
        (out / f"{site.short}.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        log.info("SAE %s: FVU %.4f, active %.3f", site, slog.fvu, slog.active_fraction)
        paths += [wd.sae_path(site), out / f"{site.short}.json"]
    return paths


def _taxonomy_sites(cfg: ExperimentConfig) -> list[HookSite]:
    return cfg.sites("taxonomy.sites") if cfg["taxonomy.sites"] else cfg.sites("extract.sites")


def stage_taxonomy(wd: Workdir, cfg: ExperimentConfig, only=None) -> list[Path]:
    out = wd.sub("taxonomy")
    suite = load_suite(wd.require(wd.data / "suite", "gen-data"))
    reports: list[TaxonomyReport] = []
    paths = []
    for site in _filter(_taxonomy_sites(cfg), only):
        sae, _ = load_sae(wd.require(wd.sae_path(site), "train-sae"))
        shard = read_shard(wd.require(shard_path(wd.root / "acts", site, "suite"), "extract"))
        traces = feature_trace(sae, shard)
        channels = channel_matrix(suite, shard.manifest, site.on_encoder, shard.meta["context_len"])
        profiles = classify_all(traces, channels, cfg["taxonomy.r_threshold"])
        rep = taxonomy_report(profiles, site.short)
        reports.append(rep)
        write_profiles_csv(profiles, site.short, out / f"{site.short}_features.csv")
        write_summary_json(rep, out / f"{site.short}_summary.json")
        paths += [out / f"{site.short}_features.csv", out / f"{site.short}_summary.json"]
    (out / "counts.csv").write_text(counts_csv(reports), encoding="utf-8")
    print(pretty_table(reports))
    return paths + [out / "counts.csv"]


def stage_ablate(wd: Workdir, cfg: ExperimentConfig, only=None) -> list[Path]:
    out = wd.sub("ablation")
    model = _load_model(wd)
    tok = cfg.tokenizer()
    tws = eval_windows(wd, cfg)
    single = _filter(cfg.sites("ablation.single_sites"), only)
    progressive = _filter(cfg.sites("ablation.progressive_sites"), only)
    harnesses: dict[HookSite, tuple[AblationHarness, np.ndarray]] = {}

    def harness(site):
        if site not in harnesses:
            sae, _ = load_sae(wd.require(wd.sae_path(site), "train-sae"))
            shard = read_shard(wd.require(shard_path(wd.root / "acts", site, "eval"), "extract"))
            acfg = AblationConfig(site, n_windows=cfg["ablation.n_windows"], pred_len=cfg["data.pred_len"],
                                  n_samples=cfg["ablation.n_samples"], n_features=cfg["ablation.n_features"],
                                  checkpoints=tuple(cfg["ablation.checkpoints"]), seed=cfg["seed"],
                                  temperature=cfg["ablation.temperature"])
            ranking, _ = rank_features(sae, np.asarray(shard.rows))
            harnesses[site] = (AblationHarness(model, sae, tws, acfg, tok), ranking)
        return harnesses[site]

    records = []
    summaries = {}
    for site in single:
        h, ranking = harness(site)
        recs = [ablate_single(h, int(j)) for j in ranking[: cfg["ablation.top_single"]]]
        records += [(site.short, r) for r in recs]
        summaries[site.short] = summarize(recs)
    curves = {}
    for site in progressive:
        h, ranking = harness(site)
        curves[site.short] = ablate_progressive(h, ranking[: cfg["ablation.n_features"]])
    write_records_csv(records, out / "records.csv")
    write_summary_csv(summaries, out / "summary.csv")
    write_progressive_csv(curves, out / "progressive.csv")
    with (out / "baselines.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "crps_clean", "crps_reconstructed"])
        for site, (h, _) in sorted(harnesses.items(), key=lambda kv: kv[0].display_key()):
            w.writerow([site.short, repr(h.clean_crps()), repr(h.baseline_crps())])
    if summaries:
        print(pretty_summary(summaries))
    return [out / n for n in ("records.csv", "summary.csv", "progressive.csv", "baselines.csv")]


def stage_report(wd: Workdir, cfg: ExperimentConfig, only=None) -> list[Path]:
    abl = wd.root / "ablation"
    summary_src = wd.require(abl / "summary.csv", "ablate")
    prog_src = wd.require(abl / "progressive.csv", "ablate")
    counts_src = wd.require(wd.root / "taxonomy" / "counts.csv", "taxonomy")
    out = wd.sub("report")
    shutil.copyfile(summary_src, out / "summary.csv")
    shutil.copyfile(counts_src, out / "taxonomy_counts.csv")
    curves = read_progressive_csv(prog_src)
    if only:
        curves = {k: v for k, v in curves.items() if HookSite.parse(k) in only}
    write_progressive_svg(curves, out / "progressive.svg")
    tables = render_tables(wd)
    (out / "tables.txt").write_text(tables + "\n", encoding="utf-8")
    print(tables)
    return [out / "summary.csv", out / "taxonomy_counts.csv", out / "progressive.svg", out / "tables.txt"]


def render_tables(wd: Workdir) -> str:
    summaries = {}
    with (wd.root / "ablation" / "summary.csv").open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ratio = None if row["max_over_median"] == "NA" else float(row["max_over_median"])
            summaries[row["site"]] = AblationSummary(int(row["n"]), float(row["mean"]), float(row["median"]),
                                                     float(row["max"]), float(row["std"]),
                                                     float(row["positive_fraction"]), ratio)
    reports = []
    for p in sorted((wd.root / "taxonomy").glob("*_summary.json")):
        d = json.loads(p.read_text())
        reports.append(TaxonomyReport(d["site"], d["counts"], d["n_features"]))
    reports.sort(key=lambda r: HookSite.parse(r.site).display_key())
    parts = ["Single-feature ablation (delta CRPS)", pretty_summary(summaries), "",
             "Concept counts per site (counts below 10 omitted)", pretty_table(reports)]
    return "\n".join(parts)


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "train-model": stage_train_model,
    "extract": stage_extract,
    "train-sae": stage_train_sae,
    "taxonomy": stage_taxonomy,
    "ablate": stage_ablate,
    "report": stage_report,
}


def run_stage(name: str, wd: Workdir, cfg: ExperimentConfig, only: list[HookSite] | None = None) -> list[Path]:
    started = _now()
    wd.root.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    paths = STAGE_FUNCS[name](wd, cfg, only)
    log.info("%s finished in %.1fs", name, time.perf_counter() - t0)
    update_manifest(wd, cfg, name, paths, started)
    return paths


def run_all(wd: Workdir, cfg: ExperimentConfig) -> None:
    for name in STAGES:
        run_stage(name, wd, cfg)
