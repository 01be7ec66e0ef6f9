"""Label SAE features with temporal concepts by correlating their activation
traces against ground-truth property channels of the diagnostic suite."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .actstore import Shard
from .sae import SaeParams, encode_dense
from .series import Series

CONCEPTS = (
    "trend_up",
    "trend_down",
    "seasonality",
    "level_shift_up",
    "level_shift_down",
    "frequency_high",
    "frequency_low",
    "high_volatility",
    "low_volatility",
    "noise",
)
UNKNOWN = "unknown"
LABELS = CONCEPTS + (UNKNOWN,)

# One signed channel per concept family; directional pairs split on the sign of r.
CHANNELS = ("trend", "seasonal", "level_shift", "frequency", "volatility", "noise")
CHANNEL_LABELS = {
    "trend": ("trend_up", "trend_down"),
    "seasonal": ("seasonality", "seasonality"),
    "level_shift": ("level_shift_up", "level_shift_down"),
    "frequency": ("frequency_high", "frequency_low"),
    "volatility": ("high_volatility", "low_volatility"),
    "noise": ("noise", "noise"),
}
NOISE_SMOOTHING = 5


class TaxonomyError(ValueError):
    pass


@dataclass
class FeatureProfile:
    feature_id: int
    r: np.ndarray  # signed Pearson r per channel, in CHANNELS order
    best_label: str
    best_score: float

    def concept_scores(self) -> dict[str, float]:
        """Signed r oriented to each concept (the down/low member gets -r)."""
        out = {}
        for ch, r in zip(CHANNELS, self.r):
            up, down = CHANNEL_LABELS[ch]
            out[up] = float(r)
            if down != up:
                out[down] = float(-r)
        return out


def feature_trace(sae: SaeParams, shard: Shard, batch: int = 8192) -> np.ndarray:
    """``(d_sae, n_rows)`` sparse-code values over the shard, in manifest order."""
    if sae.site is not None and sae.site != shard.site:
        raise TaxonomyError(f"SAE trained at {sae.site} but shard holds {shard.site}")
    out = np.zeros((sae.d_sae, shard.n_rows), dtype=np.float32)
    for s in range(0, shard.n_rows, batch):
        out[:, s : s + batch] = encode_dense(sae, np.asarray(shard.rows[s : s + batch])).T
    return out


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return x
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="same")


def _parse_window_id(wid: str) -> tuple[str, int]:
    name, _, offset = wid.rpartition("@")
    if not name:
        raise TaxonomyError(f"window id {wid!r} does not name a source series")
    return name, int(offset)


def channel_matrix(
    suite: list[Series] | dict[str, Series],
    manifest: list[dict],
    on_encoder: bool,
    context_len: int,
) -> np.ndarray:
    """``(6, positions)`` ground-truth channels aligned to shard rows.

    Encoder rows map to context positions; decoder and cross-attention rows
    map to the target segment that follows the context.
    """
    by_name = suite if isinstance(suite, dict) else {s.name: s for s in suite}
    derived: dict[str, dict[str, np.ndarray]] = {}
    for name, s in by_name.items():
        ch = s.channels
        if ch is None:
            raise TaxonomyError(f"series {name!r} has no property channels")
        derived[name] = {
            "trend": ch.trend_slope,
            "seasonal": ch.seasonal_phase_indicator,
            "level_shift": ch.level_shift_indicator,
            "frequency": ch.instantaneous_frequency,
            "volatility": ch.rolling_volatility,
            "noise": _smooth(ch.noise_amplitude, NOISE_SMOOTHING),
        }
    cols = []
    for entry in manifest:
        name, offset = _parse_window_id(entry["window"])
        if name not in derived:
            raise TaxonomyError(f"window {entry['window']!r} is not from the diagnostic suite")
        start = offset if on_encoder else offset + context_len
        stop = start + entry["count"]
        cols.append(np.stack([derived[name][c][start:stop] for c in CHANNELS]))
    if not cols:
        return np.zeros((len(CHANNELS), 0))
    mat = np.concatenate(cols, axis=1).astype(np.float64)
    for i, c in enumerate(CHANNELS):
        if c in ("frequency", "volatility", "noise"):
            mat[i] = _zscore(mat[i])
    return mat


def correlations(traces: np.ndarray, channels: np.ndarray) -> np.ndarray:
    """Pearson r of every trace row against every channel row; 0 where undefined."""
    traces = np.atleast_2d(np.asarray(traces, dtype=np.float64))
    channels = np.atleast_2d(np.asarray(channels, dtype=np.float64))
    if traces.shape[1] != channels.shape[1]:
        raise TaxonomyError(f"trace length {traces.shape[1]} != channel length {channels.shape[1]}")

    def standardize(m):
        c = m - m.mean(axis=1, keepdims=True)
        norm = np.sqrt((c * c).sum(axis=1, keepdims=True))
        ok = norm[:, 0] > 1e-12 * np.sqrt(m.shape[1])
        c[ok] /= norm[ok]
        c[~ok] = 0.0
        return c, ok

    t, _ = standardize(traces)
    c, _ = standardize(channels)
    return np.clip(t @ c.T, -1.0, 1.0)


def _label(r: np.ndarray, r_threshold: float) -> tuple[str, float]:
    win = int(np.argmax(np.abs(r)))
    score = float(r[win])
    if abs(score) < r_threshold or score == 0.0:
        return UNKNOWN, score
    up, down = CHANNEL_LABELS[CHANNELS[win]]
    return (up if score > 0 else down), score


def classify(trace_row: np.ndarray, channels: np.ndarray, r_threshold: float = 0.5,
             feature_id: int = 0) -> FeatureProfile:
    trace_row = np.asarray(trace_row, dtype=np.float64)
    if trace_row.shape[-1] != channels.shape[1]:
        raise TaxonomyError(f"trace length {trace_row.shape[-1]} != channel length {channels.shape[1]}")
    if trace_row.std() == 0:
        return FeatureProfile(feature_id, np.zeros(len(channels)), UNKNOWN, 0.0)
    r = correlations(trace_row[None], channels)[0]
    label, score = _label(r, r_threshold)
    return FeatureProfile(feature_id, r, label, score)


def classify_all(traces: np.ndarray, channels: np.ndarray, r_threshold: float = 0.5) -> list[FeatureProfile]:
    R = correlations(traces, channels)
    flat = traces.std(axis=1) == 0
    out = []
    for j, r in enumerate(R):
        if flat[j]:
            out.append(FeatureProfile(j, np.zeros(len(CHANNELS)), UNKNOWN, 0.0))
        else:
            label, score = _label(r, r_threshold)
            out.append(FeatureProfile(j, r, label, score))
    return out


@dataclass
class TaxonomyReport:
    site: str
    counts: dict[str, int]
    n_features: int

    @property
    def labeled(self) -> int:
        return self.n_features - self.counts[UNKNOWN]

    @property
    def labeled_fraction(self) -> float:
        return self.labeled / self.n_features if self.n_features else 0.0

    def to_dict(self) -> dict:
        return {"site": self.site, "counts": self.counts, "n_features": self.n_features,
                "labeled": self.labeled, "labeled_fraction": self.labeled_fraction}


def taxonomy_report(profiles: list[FeatureProfile], site: str) -> TaxonomyReport:
    counts = {label: 0 for label in LABELS}
    for p in profiles:
        counts[p.best_label] += 1
    return TaxonomyReport(site, counts, len(profiles))


def write_profiles_csv(profiles: list[FeatureProfile], site: str, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_id", "site", "label", "best_score", *(f"r_{c}" for c in CONCEPTS)])
        for p in profiles:
            scores = p.concept_scores()
            w.writerow([p.feature_id, site, p.best_label, repr(p.best_score),
                        *(repr(scores[c]) for c in CONCEPTS)])


def counts_csv(reports: list[TaxonomyReport]) -> str:
    """Concept-by-site count table; never masked."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["concept", *(r.site for r in reports)])
    for label in LABELS:
        w.writerow([label, *(r.counts[label] for r in reports)])
    w.writerow(["labeled_pct", *(f"{100 * r.labeled_fraction:.1f}" for r in reports)])
    return buf.getvalue()


def pretty_table(reports: list[TaxonomyReport], floor: int = 10) -> str:
    """Text table with counts below ``floor`` shown as ``--``."""
    width = max(10, *(len(r.site) + 2 for r in reports)) if reports else 10
    lines = ["Concept".ljust(18) + "".join(r.site.rjust(width) for r in reports)]
    for label in CONCEPTS:
        cells = [(str(r.counts[label]) if r.counts[label] >= floor else "--").rjust(width) for r in reports]
        lines.append(label.ljust(18) + "".join(cells))
    lines.append("Labeled (%)".ljust(18) + "".join(f"{100 * r.labeled_fraction:.1f}".rjust(width) for r in reports))
    return "\n".join(lines)


def write_summary_json(report: TaxonomyReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
