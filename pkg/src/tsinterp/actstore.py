"""Binary activation shards, one file per hook site.

Layout (little-endian)::

    magic "TSAC" | u32 version | u8 site kind | u32 block | u32 d_model | u64 n_rows
    float32 block, n_rows x d_model, row-major
    UTF-8 JSON footer (site, manifest, stats)
    u64 byte offset of the footer
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .forecaster import Forecaster, HookSite, forward_capture
from .tokenizer import TokenizedWindow

MAGIC = b"TSAC"
VERSION = 1
HEADER = struct.Struct("<4sIBIIQ")
TRAILER = struct.Struct("<Q")
KIND_CODES = {"encoder_block_out": 0, "decoder_block_out": 1, "cross_attention_out": 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


class ShardFormatError(ValueError):
    pass


class ShardShapeError(ValueError):
    pass


@dataclass
class ShardStats:
    mean: np.ndarray
    std: np.ndarray
    mean_norm: float

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "ShardStats":
        """Exactly rounded statistics, independent of row order."""
        rows = np.asarray(rows, dtype=np.float32)
        n, d = rows.shape
        if n == 0:
            return cls(np.zeros(d), np.zeros(d), 0.0)
        r64 = rows.astype(np.float64)
        mean = np.array([math.fsum(r64[:, j]) / n for j in range(d)])
        # float32 squares are exact in float64, so fsum gives an exact sum.
        sq = np.array([math.fsum(r64[:, j] * r64[:, j]) / n for j in range(d)])
        std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
        norms = np.sqrt(np.einsum("ij,ij->i", r64, r64))
        return cls(mean, std, math.fsum(norms) / n)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "mean_norm": self.mean_norm}

    @classmethod
    def from_dict(cls, d: dict) -> "ShardStats":
        return cls(np.array(d["mean"]), np.array(d["std"]), float(d["mean_norm"]))


@dataclass
class Shard:
    path: Path
    site: HookSite
    d_model: int
    n_rows: int
    rows: np.ndarray
    manifest: list[dict]
    stats: ShardStats | None
    meta: dict


class ShardWriter:
    """Streams rows to disk; the header row count and footer are fixed on close."""

    def __init__(self, path, site: HookSite, d_model: int, meta: dict | None = None):
        self.path = Path(path)
        self.site = site
        self.d_model = d_model
        self.meta = meta or {}
        self.n_rows = 0
        self.manifest: list[dict] = []
        self._chunks: list[np.ndarray] = []
        self._fh = self.path.open("wb")
        self._fh.write(HEADER.pack(MAGIC, VERSION, KIND_CODES[site.kind], site.block_index, d_model, 0))

    def append(self, rows: np.ndarray, window_id: str) -> None:
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[1] != self.d_model:
            raise ShardShapeError(
                f"cannot append rows of shape {rows.shape} to a shard with d_model={self.d_model}"
            )
        if not np.all(np.isfinite(rows)):
            raise ShardFormatError(f"non-finite activations for window {window_id}")
        data = np.ascontiguousarray(rows, dtype="<f4")
        self._fh.write(data.tobytes())
        self._chunks.append(data)
        self.manifest.append({"window": window_id, "offset": self.n_rows, "count": len(rows)})
        self.n_rows += len(rows)

    def close(self) -> Path:
        rows = np.concatenate(self._chunks) if self._chunks else np.zeros((0, self.d_model), np.float32)
        footer = {
            "site": self.site.short,
            "manifest": self.manifest,
            "stats": ShardStats.from_rows(rows).to_dict(),
            "meta": self.meta,
        }
        offset = self._fh.tell()
        self._fh.write(json.dumps(footer, sort_keys=True).encode("utf-8"))
        self._fh.write(TRAILER.pack(offset))
        self._fh.seek(0)
        self._fh.write(HEADER.pack(MAGIC, VERSION, KIND_CODES[self.site.kind], self.site.block_index,
                                   self.d_model, self.n_rows))
        self._fh.close()
        self._chunks = []
        return self.path

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


def read_header(path) -> tuple[HookSite, int, int]:
    path = Path(path)
    with path.open("rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise ShardFormatError(f"{path}: truncated header at byte {len(raw)}")
    magic, version, kind, block, d_model, n_rows = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ShardFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise ShardFormatError(f"{path}: unsupported version {version} at byte 4")
    if kind not in KIND_NAMES:
        raise ShardFormatError(f"{path}: unknown site kind {kind} at byte 8")
    return HookSite(KIND_NAMES[kind], block), d_model, n_rows


def read_shard(path) -> Shard:
    path = Path(path)
    site, d_model, n_rows = read_header(path)
    size = path.stat().st_size
    data_end = HEADER.size + 4 * d_model * n_rows
    if size < data_end + TRAILER.size:
        raise ShardFormatError(f"{path}: truncated; expected at least {data_end + TRAILER.size} bytes, "
                               f"file ends at byte {size}")
    with path.open("rb") as fh:
        fh.seek(size - TRAILER.size)
        (footer_at,) = TRAILER.unpack(fh.read(TRAILER.size))
        if footer_at != data_end:
            raise ShardFormatError(f"{path}: footer offset {footer_at} != end of data at byte {data_end}")
        fh.seek(footer_at)
        try:
            footer = json.loads(fh.read(size - TRAILER.size - footer_at).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ShardFormatError(f"{path}: corrupt footer at byte {footer_at}: {exc}") from None
    rows = np.memmap(path, dtype="<f4", mode="r", offset=HEADER.size, shape=(n_rows, d_model))
    stats = ShardStats.from_dict(footer["stats"]) if "stats" in footer else None
    return Shard(path, site, d_model, n_rows, rows, footer.get("manifest", []), stats, footer.get("meta", {}))


def iter_batches(rows: np.ndarray, batch: int, seed: int | None = None) -> Iterator[np.ndarray]:
    """One epoch over ``rows``; shuffled by a permutation of ``seed`` unless it is None."""
    n = len(rows)
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    for s in range(0, n, batch):
        yield np.asarray(rows[order[s : s + batch]], dtype=np.float32)


def stream_batches(path, batch: int, seed: int | None = None) -> Iterator[np.ndarray]:
    return iter_batches(read_shard(path).rows, batch, seed)


def shard_path(out_dir, site: HookSite, tag: str = "") -> Path:
    return Path(out_dir) / f"{site.short}{('.' + tag) if tag else ''}.tsac"


def extract(
    model: Forecaster,
    tws: list[TokenizedWindow],
    sites: list[HookSite],
    out_dir,
    pad_id: int,
    tag: str = "",
    chunk: int = 32,
) -> list[Path]:
    """Capture activations at ``sites`` for every window into one shard per site."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    D = model.cfg.d_model
    for site in sites:
        site.validate(model.cfg)
        existing = shard_path(out_dir, site, tag)
        if existing.exists():
            try:
                _, d_old, _ = read_header(existing)
            except ShardFormatError:
                d_old = D
            if d_old != D:
                raise ShardShapeError(f"{existing} holds d_model={d_old} rows; model has d_model={D}")
    meta = {"tag": tag}
    if tws:
        meta.update(context_len=len(tws[0].context_tokens), pred_len=len(tws[0].target_tokens))
    writers = {s: ShardWriter(shard_path(out_dir, s, tag), s, D, meta) for s in sites}
    try:
        for start in range(0, len(tws), chunk):
            part = tws[start : start + chunk]
            acts = forward_capture(model, part, sites, pad_id)
            for site, act in acts.items():
                per = act.reshape(len(part), -1, D)
                for i, tw in enumerate(part):
                    wid = tw.window.window_id if tw.window is not None else f"#{start + i}"
                    writers[site].append(per[i], wid)
    except BaseException:
        for w in writers.values():
            w._fh.close()
        raise
    return [writers[s].close() for s in sites]
