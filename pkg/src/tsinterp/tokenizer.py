"""Mean-scaling quantizer mapping real values to a discrete bin vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .series import Window

SCALE_FLOOR = 1e-6


class DecodingError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerConfig:
    """Bins occupy ids ``0..n_bins-1``; ``pad`` and ``eos`` follow them."""

    n_bins: int = 256
    clip_lo: float = -15.0
    clip_hi: float = 15.0

    def __post_init__(self):
        if self.n_bins < 8:
            raise ValueError("n_bins must be >= 8")
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be < clip_hi")

    @property
    def pad_id(self) -> int:
        return self.n_bins

    @property
    def eos_id(self) -> int:
        return self.n_bins + 1

    @property
    def vocab_size(self) -> int:
        return self.n_bins + 2

    @property
    def bin_width(self) -> float:
        return (self.clip_hi - self.clip_lo) / self.n_bins

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.clip_lo, self.clip_hi, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.clip_lo + (np.arange(self.n_bins) + 0.5) * self.bin_width

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenizedWindow:
    context_tokens: np.ndarray
    target_tokens: np.ndarray
    scale: float
    window: Window | None = None


def fit_scale(context) -> float:
    context = np.asarray(context, dtype=np.float64)
    if context.size == 0:
        raise ValueError("context must be non-empty")
    return max(float(np.mean(np.abs(context))), SCALE_FLOOR)


def quantize(values, scale: float, cfg: TokenizerConfig) -> np.ndarray:
    if scale <= 0:
        raise ValueError("scale must be positive")
    u = np.clip(np.asarray(values, dtype=np.float64) / scale, cfg.clip_lo, cfg.clip_hi)
    # Half-open bins [e_i, e_i+1); the top edge belongs to the last bin.
    ids = np.floor((u - cfg.clip_lo) / cfg.bin_width).astype(np.int64)
    return np.clip(ids, 0, cfg.n_bins - 1)


def dequantize(tokens, scale: float, cfg: TokenizerConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if np.any((tokens < 0) | (tokens >= cfg.n_bins)):
        bad = tokens[(tokens < 0) | (tokens >= cfg.n_bins)][0]
        raise DecodingError(f"token {int(bad)} is not a bin id")
    return cfg.centers[tokens] * scale


def tokenize_window(w: Window, cfg: TokenizerConfig) -> TokenizedWindow:
    scale = fit_scale(w.context)
    return TokenizedWindow(quantize(w.context, scale, cfg), quantize(w.target, scale, cfg), scale, w)
