"""CRPS scoring and SAE feature ablation through activation patching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .forecaster import Forecaster, HookSite, forecast_batch
from .sae import SaeParams, decode_dense, encode_dense
from .tokenizer import TokenizedWindow, TokenizerConfig

PAPER_CHECKPOINTS = (1, 2, 4, 8, 16, 32, 64)
EXTENDED_CHECKPOINTS = (1, 2, 4, 8, 16, 32, 64, 96, 128, 160, 200)


def crps_empirical(samples, y) -> np.ndarray | float:
    """CRPS of the empirical distribution of ``samples`` against ``y``.

    ``samples`` may be ``(m,)`` with scalar ``y`` or ``(m, H)`` with ``y`` of
    shape ``(H,)``, scoring each column independently.
    """
    x = np.asarray(samples, dtype=np.float64)
    scalar = x.ndim == 1
    if scalar:
        x = x[:, None]
    m = x.shape[0]
    if m < 1:
        raise ValueError("need at least one sample")
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    spread = np.abs(x[:, None, :] - x[None, :, :]).sum(axis=(0, 1))
    out = np.abs(x - y).mean(axis=0) - spread / (2.0 * m * m)
    out = np.maximum(out, 0.0)
    return float(out[0]) if scalar else out


def window_crps(samples: np.ndarray, target: np.ndarray) -> float:
    """Mean over the horizon of per-step CRPS."""
    return float(crps_empirical(samples, target).mean())


@dataclass(frozen=True)
class AblationConfig:
    site: HookSite
    n_windows: int = 64
    pred_len: int = 24
    n_samples: int = 4
    n_features: int = 64
    checkpoints: tuple[int, ...] = PAPER_CHECKPOINTS
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        cps = tuple(self.checkpoints)
        if any(b <= a for a, b in zip(cps, cps[1:])):
            raise ValueError("checkpoints must be strictly ascending")
        if cps and cps[-1] > self.n_features:
            raise ValueError(f"last checkpoint {cps[-1]} exceeds n_features={self.n_features}")

    @classmethod
    def ultra_fast(cls, site: HookSite, **kw) -> "AblationConfig":
        return cls(site, n_windows=256, pred_len=64, n_samples=4, n_features=64,
                   checkpoints=PAPER_CHECKPOINTS, **kw)

    @classmethod
    def extended(cls, site: HookSite, **kw) -> "AblationConfig":
        return cls(site, n_windows=1024, pred_len=64, n_samples=8, n_features=200,
                   checkpoints=EXTENDED_CHECKPOINTS, **kw)


@dataclass
class AblationRecord:
    feature: int
    crps_original: float
    crps_ablated: float
    delta: float = field(init=False)

    def __post_init__(self):
        self.delta = self.crps_ablated - self.crps_original


@dataclass
class AblationSummary:
    n: int
    mean: float
    median: float
    max: float
    std: float
    positive_fraction: float
    max_over_median: float | None

    @property
    def ratio_defined(self) -> bool:
        return self.max_over_median is not None


def summarize(records: Sequence[AblationRecord] | Sequence[float]) -> AblationSummary:
    deltas = [r.delta if isinstance(r, AblationRecord) else float(r) for r in records]
    if not deltas:
        raise ValueError("cannot summarize an empty set of ablations")
    d = np.sort(np.asarray(deltas, dtype=np.float64))
    n = len(d)
    median = float(d[(n - 1) // 2])  # lower middle for even n
    mx = float(d[-1])
    return AblationSummary(
        n=n,
        mean=float(d.mean()),
        median=median,
        max=mx,
        std=float(d.std()),
        positive_fraction=float((d > 0).mean()),
        max_over_median=mx / median if median > 0 else None,
    )


def rank_features(sae: SaeParams, rows: np.ndarray, batch: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Features ordered by mean |code| times decoder column norm, descending.

    Returns ``(ranking, scores)``; ties keep the lower feature id first.
    """
    mass = np.zeros(sae.d_sae, dtype=np.float64)
    n = len(rows)
    for s in range(0, n, batch):
        mass += np.abs(encode_dense(sae, np.asarray(rows[s : s + batch]))).sum(axis=0, dtype=np.float64)
    scores = mass / max(n, 1) * sae.decoder_norms()
    return np.argsort(-scores, kind="stable"), scores


def ablation_edit(sae: SaeParams, features: Sequence[int] | None) -> Callable[[np.ndarray], np.ndarray]:
    """Replace activations by their SAE reconstruction minus the listed features."""
    drop = np.asarray(sorted(features) if features is not None else [], dtype=np.int64)
    if drop.size and (drop.min() < 0 or drop.max() >= sae.d_sae):
        raise IndexError(f"feature id out of range for d_sae={sae.d_sae}")

    def edit(act: np.ndarray) -> np.ndarray:
        z = encode_dense(sae, act)
        if drop.size:
            z[:, drop] = 0
        return decode_dense(sae, z).astype(act.dtype)

    return edit


@dataclass
class AblationHarness:
    """Shared setup for ablations at one site over a fixed window set."""

    model: Forecaster
    sae: SaeParams
    tws: list[TokenizedWindow]
    cfg: AblationConfig
    tok_cfg: TokenizerConfig
    _baseline: float | None = field(default=None, init=False)
    _clean: float | None = field(default=None, init=False)

    def __post_init__(self):
        self.cfg.site.validate(self.model.cfg)
        self.tws = list(self.tws[: self.cfg.n_windows])
        self.targets = [tw.window.target[: self.cfg.pred_len] for tw in self.tws]

    def run_crps(self, edit=None, per_window: bool = False):
        sets = forecast_batch(self.model, self.tws, self.cfg.n_samples, self.cfg.temperature, self.cfg.seed,
                              self.tok_cfg, self.cfg.site if edit is not None else None, edit,
                              pred_len=self.cfg.pred_len)
        scores = np.array([window_crps(fs.samples, y) for fs, y in zip(sets, self.targets)])
        return scores if per_window else float(scores.mean())

    def clean_crps(self) -> float:
        if self._clean is None:
            self._clean = self.run_crps(None)
        return self._clean

    def baseline_crps(self) -> float:
        """CRPS with every activation at the site replaced by its full reconstruction."""
        if self._baseline is None:
            self._baseline = self.run_crps(ablation_edit(self.sae, None))
        return self._baseline

    def ablate(self, features: Sequence[int]) -> float:
        return self.run_crps(ablation_edit(self.sae, features))


def ablate_single(harness: AblationHarness, feature: int) -> AblationRecord:
    if not 0 <= feature < harness.sae.d_sae:
        raise IndexError(f"feature {feature} out of range for d_sae={harness.sae.d_sae}")
    return AblationRecord(feature, harness.baseline_crps(), harness.ablate([feature]))


def ablate_progressive(harness: AblationHarness, ranking: Sequence[int],
                       checkpoints: Sequence[int] | None = None) -> list[tuple[int, float]]:
    """Run CRPS after removing the top-``c`` ranked features, for each checkpoint ``c``.

    The first entry is ``(0, baseline)``.
    """
    checkpoints = tuple(harness.cfg.checkpoints if checkpoints is None else checkpoints)
    if checkpoints and checkpoints[-1] > len(ranking):
        raise ValueError(f"checkpoint {checkpoints[-1]} exceeds ranking length {len(ranking)}")
    curve = [(0, harness.baseline_crps())]
    for c in checkpoints:
        curve.append((c, harness.ablate(list(ranking[:c]))))
    return curve


# ---------------------------------------------------------------------------
# CSV outputs
# ---------------------------------------------------------------------------


def _fmt(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return repr(float(x))


def write_records_csv(rows: list[tuple[str, AblationRecord]], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "feature", "crps_orig", "crps_ablated", "delta"])
        for site, r in rows:
            w.writerow([site, r.feature, _fmt(r.crps_original), _fmt(r.crps_ablated), _fmt(r.delta)])


def write_progressive_csv(curves: dict[str, list[tuple[int, float]]], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "checkpoint", "crps"])
        for site, curve in curves.items():
            for c, v in curve:
                w.writerow([site, c, _fmt(v)])


SUMMARY_COLUMNS = ["site", "n", "mean", "median", "max", "std", "positive_fraction", "max_over_median"]


def write_summary_csv(summaries: dict[str, AblationSummary], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for site, s in summaries.items():
            w.writerow([site, s.n, _fmt(s.mean), _fmt(s.median), _fmt(s.max), _fmt(s.std),
                        _fmt(s.positive_fraction), _fmt(s.max_over_median)])


def read_progressive_csv(path) -> dict[str, list[tuple[int, float]]]:
    curves: dict[str, list[tuple[int, float]]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            curves.setdefault(row["site"], []).append((int(row["checkpoint"]), float(row["crps"])))
    return curves


def pretty_summary(summaries: dict[str, AblationSummary]) -> str:
    head = f"{'Layer':<10}{'n':>5}{'Mean':>9}{'Med.':>9}{'Max':>9}{'Std':>9}{'+Frac':>8}{'Max/Med':>10}"
    lines = [head]
    for site, s in summaries.items():
        ratio = f"{s.max_over_median:.1f}x" if s.max_over_median is not None else "undef"
        lines.append(f"{site:<10}{s.n:>5}{s.mean:>9.4f}{s.median:>9.4f}{s.max:>9.4f}{s.std:>9.4f}"
                     f"{s.positive_fraction:>8.2f}{ratio:>10}")
    return "\n".join(lines)
