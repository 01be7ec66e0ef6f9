"""Synthetic diagnostic series with ground-truth property channels, CSV
ingestion, and context/target windowing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FAMILIES = ("trend", "seasonal", "level_shift", "chirp", "hetero_noise")
CHANNEL_NAMES = (
    "trend_slope",
    "seasonal_phase_indicator",
    "level_shift_indicator",
    "instantaneous_frequency",
    "rolling_volatility",
    "noise_amplitude",
)
# Width of the signed pulse marking a level shift.
SHIFT_PULSE_WIDTH = 16


class DataError(ValueError):
    pass


@dataclass
class PropertyChannels:
    trend_slope: np.ndarray
    seasonal_phase_indicator: np.ndarray
    level_shift_indicator: np.ndarray
    instantaneous_frequency: np.ndarray
    rolling_volatility: np.ndarray
    noise_amplitude: np.ndarray

    @classmethod
    def zeros(cls, length: int) -> "PropertyChannels":
        return cls(*(np.zeros(length) for _ in CHANNEL_NAMES))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in CHANNEL_NAMES}

    def __len__(self) -> int:
        return len(self.trend_slope)


@dataclass
class Series:
    values: np.ndarray
    name: str
    channels: PropertyChannels | None = None
    family: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"series {self.name!r} contains non-finite values")

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class Window:
    context: np.ndarray
    target: np.ndarray
    source: str
    offset: int
    meta: dict = field(default_factory=dict)

    @property
    def window_id(self) -> str:
        return f"{self.source}@{self.offset}"


def _noise(rng: np.random.Generator, sigma: np.ndarray | float, length: int) -> np.ndarray:
    return rng.standard_normal(length) * sigma


def _finish(eps, sigma, length, channels: PropertyChannels) -> None:
    channels.rolling_volatility = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (length,)).copy()
    channels.noise_amplitude = np.abs(eps)


def gen_trend(length, slope, level=0.0, noise=0.0, rng=None, name="trend") -> Series:
    rng = rng or np.random.default_rng(0)
    t = np.arange(length, dtype=np.float64)
    eps = _noise(rng, noise, length)
    ch = PropertyChannels.zeros(length)
    ch.trend_slope[:] = slope
    _finish(eps, noise, length, ch)
    return Series(level + slope * t + eps, name, ch, "trend")


def gen_seasonal(length, period, amplitude=1.0, phase=0.0, level=0.0, noise=0.0, rng=None,
                 name="seasonal") -> Series:
    rng = rng or np.random.default_rng(0)
    t = np.arange(length, dtype=np.float64)
    wave = np.sin(2 * np.pi * t / period + phase)
    eps = _noise(rng, noise, length)
    ch = PropertyChannels.zeros(length)
    ch.seasonal_phase_indicator = wave.copy()
    ch.instantaneous_frequency[:] = 1.0 / period
    _finish(eps, noise, length, ch)
    return Series(level + amplitude * wave + eps, name, ch, "seasonal")


def gen_level_shift(length, shift_time, magnitude, level=0.0, noise=0.0, rng=None,
                    name="level_shift") -> Series:
    rng = rng or np.random.default_rng(0)
    t = np.arange(length)
    eps = _noise(rng, noise, length)
    ch = PropertyChannels.zeros(length)
    half = SHIFT_PULSE_WIDTH // 2
    pulse = (t >= shift_time - half) & (t < shift_time + half)
    ch.level_shift_indicator[pulse] = np.sign(magnitude)
    _finish(eps, noise, length, ch)
    values = level + magnitude * (t >= shift_time) + eps
    return Series(values, name, ch, "level_shift")


def gen_chirp(length, f0, f1, amplitude=1.0, level=0.0, noise=0.0, rng=None, name="chirp") -> Series:
    """Linear chirp whose frequency moves from ``f0`` to ``f1`` cycles/step."""
    rng = rng or np.random.default_rng(0)
    t = np.arange(length, dtype=np.float64)
    rate = (f1 - f0) / length
    phase = 2 * np.pi * (f0 * t + 0.5 * rate * t * t)
    eps = _noise(rng, noise, length)
    ch = PropertyChannels.zeros(length)
    ch.instantaneous_frequency = f0 + rate * t
    _finish(eps, noise, length, ch)
    return Series(level + amplitude * np.sin(phase) + eps, name, ch, "chirp")


def gen_hetero_noise(length, knots_t, knots_sigma, level=0.0, rng=None, name="hetero_noise") -> Series:
    """Gaussian noise whose standard deviation is piecewise linear in time."""
    rng = rng or np.random.default_rng(0)
    t = np.arange(length, dtype=np.float64)
    sigma = np.interp(t, knots_t, knots_sigma)
    eps = _noise(rng, sigma, length)
    ch = PropertyChannels.zeros(length)
    _finish(eps, sigma, length, ch)
    return Series(level + eps, name, ch, "hetero_noise")


def gen_diagnostic_suite(seed: int, count_per_family: int, length: int = 512,
                         base_noise: float = 0.05) -> list[Series]:
    """Five families of series with randomized parameters, deterministic in ``seed``."""
    if length < 128:
        raise ValueError("diagnostic series need length >= 128")
    rng = np.random.default_rng(seed)
    out: list[Series] = []
    for family in FAMILIES:
        for i in range(count_per_family):
            sub = np.random.default_rng(rng.integers(2**63))
            level = sub.uniform(0.5, 3.0)
            name = f"{family}_{i:03d}"
            if family == "trend":
                slope = sub.choice([-1.0, 1.0]) * sub.uniform(0.002, 0.01)
                s = gen_trend(length, slope, level, base_noise, sub, name)
            elif family == "seasonal":
                period = float(sub.integers(8, 48))
                s = gen_seasonal(length, period, sub.uniform(0.5, 1.5), sub.uniform(0, 2 * np.pi),
                                 level, base_noise, sub, name)
            elif family == "level_shift":
                t0 = int(sub.integers(length // 4, 3 * length // 4))
                mag = sub.choice([-1.0, 1.0]) * sub.uniform(0.5, 2.0)
                s = gen_level_shift(length, t0, mag, level, base_noise, sub, name)
            elif family == "chirp":
                f0, f1 = sorted(sub.uniform(0.01, 0.2, size=2))
                if sub.random() < 0.5:
                    f0, f1 = f1, f0
                s = gen_chirp(length, f0, f1, sub.uniform(0.5, 1.5), level, base_noise, sub, name)
            else:
                n_knots = 4
                knots_t = np.linspace(0, length - 1, n_knots)
                knots_sigma = sub.uniform(0.05, 1.0, size=n_knots)
                s = gen_hetero_noise(length, knots_t, knots_sigma, level, sub, name)
            out.append(s)
    return out


def load_csv(path, value_column: str) -> Series:
    path = Path(path)
    if not path.exists():
        raise DataError(f"CSV file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if value_column not in header:
            raise DataError(f"{path}: column {value_column!r} not in header {header}")
        col = header.index(value_column)
        values = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            cell = row[col].strip() if col < len(row) else ""
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {line_no}: cannot parse {cell!r} as a number") from None
            if not np.isfinite(v):
                raise DataError(f"{path}: row {line_no}: non-finite value {cell!r}")
            values.append(v)
    return Series(np.array(values), path.stem)


def make_windows(s: Series, context_len: int, pred_len: int, max_windows: int | None = None,
                 stride: int = 1, seed: int = 0) -> list[Window]:
    span = context_len + pred_len
    if span > len(s):
        raise DataError(f"series {s.name!r} of length {len(s)} is shorter than {span}")
    offsets = np.arange(0, len(s) - span + 1, stride)
    if max_windows is not None and len(offsets) > max_windows:
        rng = np.random.default_rng(seed)
        offsets = np.sort(rng.choice(offsets, size=max_windows, replace=False))
    return [
        Window(
            context=s.values[o : o + context_len].copy(),
            target=s.values[o + context_len : o + span].copy(),
            source=s.name,
            offset=int(o),
        )
        for o in offsets
    ]


def save_suite(suite: list[Series], out_dir) -> None:
    """One CSV of values per series plus a JSON sidecar with its channels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for s in suite:
        with (out_dir / f"{s.name}.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for t, v in enumerate(s.values):
                w.writerow([t, repr(float(v))])
        sidecar = {"name": s.name, "family": s.family}
        if s.channels is not None:
            sidecar["channels"] = {k: v.tolist() for k, v in s.channels.as_dict().items()}
        (out_dir / f"{s.name}.json").write_text(json.dumps(sidecar))
        index.append(s.name)
    (out_dir / "index.json").write_text(json.dumps(index))


def load_suite(in_dir) -> list[Series]:
    in_dir = Path(in_dir)
    index_path = in_dir / "index.json"
    if not index_path.exists():
        raise DataError(f"no diagnostic suite index at {index_path}")
    out = []
    for name in json.loads(index_path.read_text()):
        s = load_csv(in_dir / f"{name}.csv", "value")
        sidecar = json.loads((in_dir / f"{name}.json").read_text())
        channels = None
        if "channels" in sidecar:
            channels = PropertyChannels(**{k: np.array(v) for k, v in sidecar["channels"].items()})
        out.append(Series(s.values, name, channels, sidecar.get("family")))
    return out
