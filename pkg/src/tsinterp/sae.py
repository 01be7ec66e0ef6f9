"""TopK sparse autoencoders over residual-stream activations.

    a = W_enc (x - b_dec) + b_enc
    z = TopK(a, k)            # k largest entries kept as-is, the rest zeroed
    x_hat = W_dec z + b_dec

Selection is by value with ties going to the lowest feature index, and there
is no rectifier on the kept values. Decoder columns are held at unit norm.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .actstore import KIND_CODES, KIND_NAMES, iter_batches, read_shard
from .forecaster import HookSite
from .numerics import DivergenceError, LrSchedule, Parameter

log = logging.getLogger(__name__)

MAGIC = b"TSAE"
VERSION = 1


class SaeFormatError(ValueError):
    pass


@dataclass
class SaeParams:
    W_enc: np.ndarray  # (d_sae, d_model)
    b_enc: np.ndarray  # (d_sae,)
    W_dec: np.ndarray  # (d_model, d_sae)
    b_dec: np.ndarray  # (d_model,)
    k: int
    site: HookSite | None = None

    def __post_init__(self):
        if self.k > self.d_sae:
            raise ValueError(f"k={self.k} exceeds d_sae={self.d_sae}")

    @property
    def d_sae(self) -> int:
        return self.W_enc.shape[0]

    @property
    def d_model(self) -> int:
        return self.W_enc.shape[1]

    def decoder_norms(self) -> np.ndarray:
        return np.linalg.norm(self.W_dec.astype(np.float64), axis=0)


@dataclass
class SparseCode:
    indices: np.ndarray
    values: np.ndarray


@dataclass
class SaeConfig:
    d_sae: int = 512
    k: int = 16
    steps: int = 5000
    batch: int = 256
    base_lr: float = 3e-4
    warmup_steps: int = 0
    dead_scan_every: int = 500
    dead_scan_batches: int = 50
    resample_until: float = 0.75
    resample_pool: int = 4096
    seed: int = 0


@dataclass
class SaeTrainLog:
    mse: list[float] = field(default_factory=list)
    dead_counts: list[tuple[int, int]] = field(default_factory=list)
    resample_events: list[tuple[int, int]] = field(default_factory=list)
    fvu: float | None = None
    active_fraction: float | None = None


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------


def topk_mask(a: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row, ties to the lowest index."""
    n, d = a.shape
    if k >= d:
        return np.ones_like(a, dtype=bool)
    if k <= 0:
        return np.zeros_like(a, dtype=bool)
    kth = np.partition(a, d - k, axis=1)[:, d - k : d - k + 1]
    greater = a > kth
    need = k - greater.sum(axis=1, keepdims=True)
    eq = a == kth
    return greater | (eq & (np.cumsum(eq, axis=1) <= need))


def pre_activations(p: SaeParams, X: np.ndarray) -> np.ndarray:
    return (X - p.b_dec) @ p.W_enc.T + p.b_enc


def encode_dense(p: SaeParams, X: np.ndarray) -> np.ndarray:
    """Codes for a batch of rows as a dense ``(n, d_sae)`` matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=p.W_enc.dtype))
    a = pre_activations(p, X)
    return np.where(topk_mask(a, p.k), a, 0).astype(a.dtype)


def decode_dense(p: SaeParams, Z: np.ndarray) -> np.ndarray:
    return Z @ p.W_dec.T + p.b_dec


def encode(p: SaeParams, x: np.ndarray) -> SparseCode:
    x = np.asarray(x, dtype=p.W_enc.dtype).reshape(1, -1)
    a = pre_activations(p, x)[0]
    idx = np.sort(np.nonzero(topk_mask(a[None], p.k)[0])[0])
    return SparseCode(idx, a[idx])


def decode(p: SaeParams, z: SparseCode) -> np.ndarray:
    idx = np.asarray(z.indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= p.d_sae):
        raise IndexError(f"feature index out of range for d_sae={p.d_sae}")
    return p.W_dec[:, idx] @ np.asarray(z.values, dtype=p.W_dec.dtype) + p.b_dec


def reconstruct(p: SaeParams, X: np.ndarray) -> np.ndarray:
    return decode_dense(p, encode_dense(p, X))


def fvu(p: SaeParams, X: np.ndarray) -> float:
    X = np.asarray(X, dtype=np.float64)
    err = ((reconstruct(p, X.astype(p.W_enc.dtype)) - X) ** 2).sum()
    var = ((X - X.mean(axis=0)) ** 2).sum()
    return float(err / var) if var > 0 else float("inf") if err > 0 else 0.0


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------


def loss_and_grads(p: SaeParams, X: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean over the batch of ``||x - x_hat||^2 / d_model`` and its gradients."""
    n, d = X.shape
    xc = X - p.b_dec
    a = xc @ p.W_enc.T + p.b_enc
    mask = topk_mask(a, p.k)
    z = np.where(mask, a, 0).astype(a.dtype)
    err = z @ p.W_dec.T + p.b_dec - X
    loss = float((err.astype(np.float64) ** 2).sum() / (n * d))
    dx = err * (2.0 / (n * d))
    dz = (dx @ p.W_dec) * mask
    return loss, {
        "W_dec": dx.T @ z,
        "b_dec": dx.sum(axis=0) - (dz @ p.W_enc).sum(axis=0),
        "W_enc": dz.T @ xc,
        "b_enc": dz.sum(axis=0),
    }


# ---------------------------------------------------------------------------
# dead features
# ---------------------------------------------------------------------------


def dead_feature_scan(p: SaeParams, sample: np.ndarray, batch: int = 4096) -> tuple[np.ndarray, float]:
    """Features that enter no TopK set over ``sample``, and the active fraction."""
    fired = np.zeros(p.d_sae, dtype=bool)
    for s in range(0, len(sample), batch):
        X = np.asarray(sample[s : s + batch], dtype=p.W_enc.dtype)
        fired |= topk_mask(pre_activations(p, X), p.k).any(axis=0)
    dead = np.nonzero(~fired)[0]
    return dead, 1.0 - len(dead) / p.d_sae


def resample_dead(
    p: SaeParams,
    dead: np.ndarray,
    inputs: np.ndarray,
    params: dict[str, Parameter] | None = None,
) -> int:
    """Point dead features at the residuals of the worst-reconstructed inputs.

    Returns the number of features whose directions were reset.
    """
    dead = np.asarray(dead, dtype=np.int64)
    if dead.size == 0:
        return 0
    X = np.asarray(inputs, dtype=p.W_enc.dtype)
    resid = (X - reconstruct(p, X)).astype(np.float64)
    norms = np.linalg.norm(resid, axis=1)
    usable = np.nonzero(norms > 1e-8)[0]
    if usable.size == 0:
        log.warning("resample_dead: no reconstruction residuals; %d dead features left unchanged", dead.size)
        return 0
    order = usable[np.argsort(-norms[usable], kind="stable")]
    live = np.setdiff1d(np.arange(p.d_sae), dead)
    enc_norm = float(np.linalg.norm(p.W_enc[live], axis=1).mean()) if live.size else 1.0
    for n_done, j in enumerate(dead):
        r = order[n_done % len(order)]
        direction = resid[r] / norms[r]
        p.W_dec[:, j] = direction
        p.W_enc[j] = direction * 0.2 * enc_norm
        p.b_enc[j] = 0.0
    if params is not None:
        for key, sl in (("W_dec", (slice(None), dead)), ("W_enc", (dead,)), ("b_enc", (dead,))):
            params[key].adam_m[sl] = 0
            params[key].adam_v[sl] = 0
    return int(dead.size)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def init_params(d_model: int, cfg: SaeConfig, warmup: np.ndarray, site: HookSite | None = None) -> SaeParams:
    dtype = nx.get_dtype()
    rng = np.random.default_rng(cfg.seed)
    W_dec = rng.standard_normal((d_model, cfg.d_sae))
    W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
    return SaeParams(
        W_enc=np.ascontiguousarray(W_dec.T).astype(dtype),
        b_enc=np.zeros(cfg.d_sae, dtype=dtype),
        W_dec=W_dec.astype(dtype),
        b_dec=np.asarray(warmup, dtype=np.float64).mean(axis=0).astype(dtype),
        k=cfg.k,
        site=site,
    )


def normalize_decoder(p: SaeParams) -> None:
    norms = np.linalg.norm(p.W_dec, axis=0, keepdims=True)
    p.W_dec /= np.maximum(norms, 1e-12)


def _as_rows(source) -> tuple[np.ndarray, HookSite | None]:
    if isinstance(source, (str, Path)):
        shard = read_shard(source)
        return shard.rows, shard.site
    return np.asarray(source), None


def train_sae(source, cfg: SaeConfig, site: HookSite | None = None) -> tuple[SaeParams, SaeTrainLog]:
    """Fit a TopK SAE to a shard path or an in-memory ``(n, d_model)`` array."""
    rows, shard_site = _as_rows(source)
    site = site or shard_site
    n, d_model = rows.shape
    if n < cfg.batch:
        raise ValueError(f"need at least batch={cfg.batch} rows, got {n}")
    rng = np.random.default_rng(cfg.seed)
    warm_idx = np.sort(rng.choice(n, size=min(n, 4 * cfg.batch), replace=False))
    p = init_params(d_model, cfg, rows[warm_idx], site)
    log_ = SaeTrainLog()
    params = {name: Parameter(getattr(p, name), name=name) for name in ("W_enc", "b_enc", "W_dec", "b_dec")}
    schedule = LrSchedule(cfg.base_lr, max(cfg.steps, 1), cfg.warmup_steps)

    def batches():
        epoch = 0
        while True:
            for X in iter_batches(rows, cfg.batch, seed=cfg.seed * 1_000_003 + epoch):
                if len(X) == cfg.batch:
                    yield X
            epoch += 1

    stream = batches()
    scan_rows = min(n, cfg.dead_scan_batches * cfg.batch)
    for step in range(cfg.steps):
        X = next(stream).astype(p.W_enc.dtype)
        loss, grads = loss_and_grads(p, X)
        if not np.isfinite(loss):
            raise DivergenceError(f"SAE loss became non-finite at step {step}", step)
        # Remove the gradient component parallel to each decoder column.
        gd = grads["W_dec"]
        gd -= p.W_dec * (p.W_dec * gd).sum(axis=0, keepdims=True)
        lr = schedule(step)
        for name, prm in params.items():
            prm.grad[...] = grads[name]
            try:
                nx.adam_step(prm, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at SAE step {step}", step) from exc
        normalize_decoder(p)
        log_.mse.append(loss)
        if cfg.dead_scan_every and (step + 1) % cfg.dead_scan_every == 0 and step + 1 < cfg.steps:
            idx = np.sort(rng.choice(n, size=scan_rows, replace=False))
            dead, _ = dead_feature_scan(p, rows[idx])
            log_.dead_counts.append((step + 1, int(dead.size)))
            if dead.size and step + 1 <= cfg.resample_until * cfg.steps:
                pool_idx = np.sort(rng.choice(n, size=min(n, cfg.resample_pool), replace=False))
                changed = resample_dead(p, dead, rows[pool_idx], params)
                if changed:
                    log_.resample_events.append((step + 1, changed))
                    normalize_decoder(p)
    eval_idx = np.sort(rng.choice(n, size=min(n, 8192), replace=False))
    sample = np.asarray(rows[eval_idx], dtype=np.float32)
    log_.fvu = fvu(p, sample)
    _, log_.active_fraction = dead_feature_scan(p, sample)
    return p, log_


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_HEAD = struct.Struct("<4sIBIIII")


def save_sae(p: SaeParams, path, config: SaeConfig | dict | None = None, extra: dict | None = None) -> None:
    site = p.site or HookSite("encoder_block_out", 0)
    buf = io.BytesIO()
    buf.write(_HEAD.pack(MAGIC, VERSION, KIND_CODES[site.kind], site.block_index, p.d_model, p.d_sae, p.k))
    for arr in (p.W_enc, p.b_enc, p.W_dec, p.b_dec):
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    footer_at = buf.tell()
    cfg = asdict(config) if isinstance(config, SaeConfig) else (config or {})
    footer = {"config": cfg, "site": p.site.short if p.site else None, **(extra or {})}
    buf.write(json.dumps(footer, sort_keys=True).encode("utf-8"))
    buf.write(struct.pack("<Q", footer_at))
    Path(path).write_bytes(buf.getvalue())


def load_sae(path) -> tuple[SaeParams, dict]:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size or data[:4] != MAGIC:
        raise SaeFormatError(f"{path}: not an SAE checkpoint")
    _, version, kind, block, d_model, d_sae, k = _HEAD.unpack_from(data)
    if version != VERSION:
        raise SaeFormatError(f"{path}: unsupported version {version}")
    pos = _HEAD.size
    arrays = []
    for shape in ((d_sae, d_model), (d_sae,), (d_model, d_sae), (d_model,)):
        count = int(np.prod(shape))
        if pos + 4 * count > len(data):
            raise SaeFormatError(f"{path}: truncated at byte {pos}")
        arrays.append(np.frombuffer(data, "<f4", count, pos).reshape(shape).astype(np.float32))
        pos += 4 * count
    (footer_at,) = struct.unpack_from("<Q", data, len(data) - 8)
    footer = json.loads(data[footer_at : len(data) - 8].decode("utf-8"))
    site = HookSite(KIND_NAMES[kind], block)
    return SaeParams(*arrays, k=k, site=site), footer
