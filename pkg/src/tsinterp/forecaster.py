"""Miniature encoder-decoder transformer over quantized series tokens.

Pre-norm blocks with RMS normalization, bias-free projections and a GELU
feed-forward, trained by teacher-forced cross-entropy over bin ids.
Gradients are written out by hand for every layer.

Hook sites name residual-stream taps: ``enc{i}`` is the output of encoder
block ``i`` after its last residual add, ``dec{i}`` likewise for decoder
blocks, and ``xattn{i}`` is the cross-attention sublayer output of decoder
block ``i`` before it joins the residual stream.
"""

from __future__ import annotations

import io
import json
import logging
import re
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import numerics as nx
from .numerics import DivergenceError, LrSchedule, Parameter
from .tokenizer import TokenizedWindow, TokenizerConfig, dequantize

log = logging.getLogger(__name__)

NORM_EPS = 1e-6
MASK_VALUE = -1e30
CHECKPOINT_MAGIC = b"TSLM"
CHECKPOINT_VERSION = 1

Edit = Callable[[np.ndarray], np.ndarray]


class PatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_encoder_blocks: int = 4
    n_decoder_blocks: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab: int = 258
    max_context: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("n_encoder_blocks", "n_decoder_blocks", "d_model", "n_heads", "d_ff", "vocab",
                     "max_context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


SITE_KINDS = {"enc": "encoder_block_out", "dec": "decoder_block_out", "xattn": "cross_attention_out"}
_SITE_RE = re.compile(r"^(enc|dec|xattn)(\d+)$")


@dataclass(frozen=True, order=True)
class HookSite:
    kind: str
    block_index: int

    def __post_init__(self):
        if self.kind not in SITE_KINDS.values():
            raise ValueError(f"unknown hook site kind {self.kind!r}")
        if self.block_index < 0:
            raise ValueError("block_index must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "HookSite":
        m = _SITE_RE.match(text.strip())
        if not m:
            raise ValueError(f"bad site spec {text!r}; expected enc<i>, dec<i> or xattn<i>")
        return cls(SITE_KINDS[m.group(1)], int(m.group(2)))

    @property
    def short(self) -> str:
        prefix = {v: k for k, v in SITE_KINDS.items()}[self.kind]
        return f"{prefix}{self.block_index}"

    def display_key(self) -> tuple[int, int]:
        """Encoder, decoder, cross-attention, then block index."""
        return list(SITE_KINDS.values()).index(self.kind), self.block_index

    @property
    def on_encoder(self) -> bool:
        return self.kind == "encoder_block_out"

    def __str__(self) -> str:
        return self.short

    def validate(self, cfg: ModelConfig) -> None:
        limit = cfg.n_encoder_blocks if self.on_encoder else cfg.n_decoder_blocks
        if self.block_index >= limit:
            raise ValueError(f"site {self} out of range for a model with {limit} blocks")


@dataclass
class ForecastSampleSet:
    samples: np.ndarray  # (n_samples, H)
    window: TokenizedWindow | None = None
    tokens: np.ndarray | None = None


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "wk", "wv", "wo")]


class Forecaster:
    def __init__(self, cfg: ModelConfig, dtype=None):
        self.cfg = cfg
        dtype = dtype or nx.get_dtype()
        rng = np.random.default_rng(cfg.seed)
        D, F = cfg.d_model, cfg.d_ff
        depth = cfg.n_encoder_blocks + cfg.n_decoder_blocks
        resid_scale = 1.0 / np.sqrt(2.0 * depth)
        params: dict[str, np.ndarray] = {
            "tok_emb": rng.standard_normal((cfg.vocab, D)) * 0.5,
            "enc_pos": rng.standard_normal((cfg.max_context, D)) * 0.5,
            "dec_pos": rng.standard_normal((cfg.max_context, D)) * 0.5,
        }

        def lin(n_in, n_out, scale=1.0):
            return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in) * scale

        def attn(prefix):
            q, k, v, o = _attn_names(prefix)
            params[q], params[k], params[v] = lin(D, D), lin(D, D), lin(D, D)
            params[o] = lin(D, D, resid_scale)

        for i in range(cfg.n_encoder_blocks):
            p = f"enc{i}"
            params[f"{p}.norm1"] = np.ones(D)
            attn(f"{p}.self")
            params[f"{p}.norm2"] = np.ones(D)
            params[f"{p}.w1"], params[f"{p}.w2"] = lin(D, F), lin(F, D, resid_scale)
        params["enc_final"] = np.ones(D)
        for i in range(cfg.n_decoder_blocks):
            p = f"dec{i}"
            params[f"{p}.norm1"] = np.ones(D)
            attn(f"{p}.self")
            params[f"{p}.norm2"] = np.ones(D)
            attn(f"{p}.cross")
            params[f"{p}.norm3"] = np.ones(D)
            params[f"{p}.w1"], params[f"{p}.w2"] = lin(D, F), lin(F, D, resid_scale)
        params["dec_final"] = np.ones(D)
        params["w_out"] = rng.standard_normal((D, cfg.vocab)) * 0.02
        self.params = {k: Parameter(v.astype(dtype), name=k) for k, v in params.items()}

    @property
    def dtype(self):
        return self.params["tok_emb"].value.dtype

    def v(self, name: str) -> np.ndarray:
        return self.params[name].value

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- attention ---------------------------------------------------------

    def _attn_fwd(self, prefix, xq, xkv, causal):
        wq, wk, wv, wo = (self.v(n) for n in _attn_names(prefix))
        B, Tq, D = xq.shape
        Tk = xkv.shape[1]
        H = self.cfg.n_heads
        dh = D // H
        q = (xq @ wq).reshape(B, Tq, H, dh).transpose(0, 2, 1, 3)
        k = (xkv @ wk).reshape(B, Tk, H, dh).transpose(0, 2, 1, 3)
        v = (xkv @ wv).reshape(B, Tk, H, dh).transpose(0, 2, 1, 3)
        s = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        if causal:
            s += np.triu(np.full((Tq, Tk), MASK_VALUE, dtype=s.dtype), k=1)
        p = nx.softmax_rows(s)
        o = (p @ v).transpose(0, 2, 1, 3).reshape(B, Tq, D)
        return o @ wo, (xq, xkv, q, k, v, p, o)

    def _attn_bwd(self, prefix, dout, cache):
        xq, xkv, q, k, v, p, o = cache
        nq, nk, nv, no = _attn_names(prefix)
        B, Tq, D = xq.shape
        Tk = xkv.shape[1]
        H = self.cfg.n_heads
        dh = D // H
        P = self.params
        P[no].grad += o.reshape(-1, D).T @ dout.reshape(-1, D)
        do = (dout @ self.v(no).T).reshape(B, Tq, H, dh).transpose(0, 2, 1, 3)
        dp = do @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ do
        ds = nx.softmax_backward(p, dp) * (1.0 / np.sqrt(dh))
        dq = (ds @ k).transpose(0, 2, 1, 3).reshape(B, Tq, D)
        dk = (ds.transpose(0, 1, 3, 2) @ q).transpose(0, 2, 1, 3).reshape(B, Tk, D)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, Tk, D)
        P[nq].grad += xq.reshape(-1, D).T @ dq.reshape(-1, D)
        P[nk].grad += xkv.reshape(-1, D).T @ dk.reshape(-1, D)
        P[nv].grad += xkv.reshape(-1, D).T @ dv.reshape(-1, D)
        dxq = dq @ self.v(nq).T
        dxkv = dk @ self.v(nk).T + dv @ self.v(nv).T
        return dxq, dxkv

    # -- sublayers ---------------------------------------------------------

    def _norm_fwd(self, name, x):
        y, inv = nx.rmsnorm_forward(x, self.v(name), NORM_EPS)
        return y, (x, inv)

    def _norm_bwd(self, name, dy, cache):
        x, inv = cache
        dx, dg = nx.rmsnorm_backward(dy, x, self.v(name), inv)
        self.params[name].grad += dg
        return dx

    def _ffn_fwd(self, prefix, x):
        u = x @ self.v(f"{prefix}.w1")
        g, t = nx.gelu(u, return_tanh=True)
        return g @ self.v(f"{prefix}.w2"), (x, u, g, t)

    def _ffn_bwd(self, prefix, dy, cache):
        x, u, g, t = cache
        D = x.shape[-1]
        F = u.shape[-1]
        self.params[f"{prefix}.w2"].grad += g.reshape(-1, F).T @ dy.reshape(-1, D)
        du = nx.gelu_backward(dy @ self.v(f"{prefix}.w2").T, u, t)
        self.params[f"{prefix}.w1"].grad += x.reshape(-1, D).T @ du.reshape(-1, F)
        return du @ self.v(f"{prefix}.w1").T

    # -- encoder -----------------------------------------------------------

    def embed_context(self, ctx_tokens: np.ndarray) -> np.ndarray:
        C = ctx_tokens.shape[1]
        if C > self.cfg.max_context:
            raise ValueError(f"context length {C} exceeds max_context {self.cfg.max_context}")
        return self.v("tok_emb")[ctx_tokens] + self.v("enc_pos")[:C]

    def _enc_block(self, i, h, caches):
        p = f"enc{i}"
        n1, c1 = self._norm_fwd(f"{p}.norm1", h)
        a, ca = self._attn_fwd(f"{p}.self", n1, n1, causal=False)
        h2 = h + a
        n2, c2 = self._norm_fwd(f"{p}.norm2", h2)
        f, cf = self._ffn_fwd(p, n2)
        if caches is not None:
            caches.append((c1, ca, c2, cf))
        return h2 + f

    def run_encoder(self, h: np.ndarray, start: int = 0, stop: int | None = None, caches=None) -> np.ndarray:
        """Run encoder blocks ``start..stop-1`` on residual stream ``h``."""
        stop = self.cfg.n_encoder_blocks if stop is None else stop
        for i in range(start, stop):
            h = self._enc_block(i, h, caches)
        return h

    def encoder_memory(self, h_last: np.ndarray) -> np.ndarray:
        return nx.rmsnorm_forward(h_last, self.v("enc_final"), NORM_EPS)[0]

    # -- teacher-forced full pass -------------------------------------------

    def forward(self, ctx_tokens, dec_in, hooks: dict[HookSite, Edit] | None = None, keep_cache=False):
        """Logits ``(B, H, vocab)`` under teacher forcing.

        ``hooks`` maps sites to functions applied to the ``(B, T, D)``
        activation at that site; their return value replaces it.
        """
        hooks = hooks or {}
        cfg = self.cfg
        cache: dict = {"ctx": ctx_tokens, "dec_in": dec_in, "enc": [], "dec": []} if keep_cache else None
        h = self.embed_context(ctx_tokens)
        for i in range(cfg.n_encoder_blocks):
            h = self._enc_block(i, h, cache["enc"] if keep_cache else None)
            site = HookSite("encoder_block_out", i)
            if site in hooks:
                h = hooks[site](h)
        mem, cmem = self._norm_fwd("enc_final", h)
        T = dec_in.shape[1]
        if T > cfg.max_context:
            raise ValueError(f"target length {T} exceeds max_context {cfg.max_context}")
        x = self.v("tok_emb")[dec_in] + self.v("dec_pos")[:T]
        for i in range(cfg.n_decoder_blocks):
            p = f"dec{i}"
            n1, c1 = self._norm_fwd(f"{p}.norm1", x)
            a, ca = self._attn_fwd(f"{p}.self", n1, n1, causal=True)
            x2 = x + a
            n2, c2 = self._norm_fwd(f"{p}.norm2", x2)
            xa, cx = self._attn_fwd(f"{p}.cross", n2, mem, causal=False)
            site = HookSite("cross_attention_out", i)
            if site in hooks:
                xa = hooks[site](xa)
            x3 = x2 + xa
            n3, c3 = self._norm_fwd(f"{p}.norm3", x3)
            f, cf = self._ffn_fwd(p, n3)
            x = x3 + f
            site = HookSite("decoder_block_out", i)
            if site in hooks:
                x = hooks[site](x)
            if keep_cache:
                cache["dec"].append((c1, ca, c2, cx, c3, cf))
        y, cy = self._norm_fwd("dec_final", x)
        logits = y @ self.v("w_out")
        if keep_cache:
            cache.update(mem=cmem, y=y, final=cy)
            return logits, cache
        return logits

    def backward(self, dlogits: np.ndarray, cache: dict) -> None:
        """Accumulate parameter gradients for a ``forward(..., keep_cache=True)`` pass."""
        cfg = self.cfg
        D = cfg.d_model
        y = cache["y"]
        self.params["w_out"].grad += y.reshape(-1, D).T @ dlogits.reshape(-1, dlogits.shape[-1])
        dx = self._norm_bwd("dec_final", dlogits @ self.v("w_out").T, cache["final"])
        dmem = np.zeros_like(cache["mem"][0])
        for i in reversed(range(cfg.n_decoder_blocks)):
            p = f"dec{i}"
            c1, ca, c2, cx, c3, cf = cache["dec"][i]
            dx3 = dx + self._norm_bwd(f"{p}.norm3", self._ffn_bwd(p, dx, cf), c3)
            dn2, dm = self._attn_bwd(f"{p}.cross", dx3, cx)
            dmem += dm
            dx2 = dx3 + self._norm_bwd(f"{p}.norm2", dn2, c2)
            dq, dkv = self._attn_bwd(f"{p}.self", dx2, ca)
            dx = dx2 + self._norm_bwd(f"{p}.norm1", dq + dkv, c1)
        dec_in = cache["dec_in"]
        T = dec_in.shape[1]
        self.params["dec_pos"].grad[:T] += dx.sum(axis=0)
        self._embed_bwd(dec_in, dx)
        dh = self._norm_bwd("enc_final", dmem, cache["mem"])
        for i in reversed(range(cfg.n_encoder_blocks)):
            p = f"enc{i}"
            c1, ca, c2, cf = cache["enc"][i]
            dh2 = dh + self._norm_bwd(f"{p}.norm2", self._ffn_bwd(p, dh, cf), c2)
            dq, dkv = self._attn_bwd(f"{p}.self", dh2, ca)
            dh = dh2 + self._norm_bwd(f"{p}.norm1", dq + dkv, c1)
        ctx = cache["ctx"]
        C = ctx.shape[1]
        self.params["enc_pos"].grad[:C] += dh.sum(axis=0)
        self._embed_bwd(ctx, dh)

    def _embed_bwd(self, tokens, d):
        flat = tokens.reshape(-1)
        onehot = np.zeros((flat.size, self.cfg.vocab), dtype=d.dtype)
        onehot[np.arange(flat.size), flat] = 1.0
        self.params["tok_emb"].grad += onehot.T @ d.reshape(flat.size, -1)

    # -- incremental decoding ---------------------------------------------

    def _cross_kv(self, mem: np.ndarray):
        H = self.cfg.n_heads
        B, C, D = mem.shape
        dh = D // H
        kv = []
        for i in range(self.cfg.n_decoder_blocks):
            k = (mem @ self.v(f"dec{i}.cross.wk")).reshape(B, C, H, dh).transpose(0, 2, 3, 1)
            v = (mem @ self.v(f"dec{i}.cross.wv")).reshape(B, C, H, dh).transpose(0, 2, 1, 3)
            kv.append((np.ascontiguousarray(k), np.ascontiguousarray(v)))
        return kv

    def _step_attn(self, prefix, x, kt, v):
        """Single-position attention of ``x`` (B, D) over keys (B, H, dh, T) and values (B, H, T, dh)."""
        B, D = x.shape
        H = self.cfg.n_heads
        dh = D // H
        q = (x @ self.v(f"{prefix}.wq")).reshape(B, H, 1, dh)
        s = (q @ kt) * (1.0 / np.sqrt(dh))
        o = (nx.softmax_rows(s) @ v).reshape(B, D)
        return o @ self.v(f"{prefix}.wo")

    def sample_tokens(
        self,
        mem: np.ndarray,
        uniforms: np.ndarray,
        temperature: float,
        n_bins: int,
        edits: dict[HookSite, Edit] | None = None,
        pad_id: int | None = None,
    ) -> np.ndarray:
        """Autoregressive rollouts, one per row of ``mem``.

        ``uniforms`` has shape ``(B, H)``; tokens are drawn by inverting the
        CDF of the (temperature-scaled) softmax over bin ids, so two passes
        sharing uniforms differ only where their distributions differ.
        """
        cfg = self.cfg
        edits = edits or {}
        B, Hn = uniforms.shape
        D = cfg.d_model
        nh = cfg.n_heads
        dh = D // nh
        pad_id = n_bins if pad_id is None else pad_id
        cross = self._cross_kv(mem)
        self_k = [np.zeros((B, nh, dh, Hn), dtype=mem.dtype) for _ in range(cfg.n_decoder_blocks)]
        self_v = [np.zeros((B, nh, Hn, dh), dtype=mem.dtype) for _ in range(cfg.n_decoder_blocks)]
        out = np.empty((B, Hn), dtype=np.int64)
        tok = np.full(B, pad_id, dtype=np.int64)
        for t in range(Hn):
            x = self.v("tok_emb")[tok] + self.v("dec_pos")[t]
            for i in range(cfg.n_decoder_blocks):
                p = f"dec{i}"
                n1 = nx.rmsnorm_forward(x, self.v(f"{p}.norm1"), NORM_EPS)[0]
                self_k[i][..., t] = (n1 @ self.v(f"{p}.self.wk")).reshape(B, nh, dh)
                self_v[i][:, :, t] = (n1 @ self.v(f"{p}.self.wv")).reshape(B, nh, dh)
                x = x + self._step_attn(f"{p}.self", n1, self_k[i][..., : t + 1], self_v[i][:, :, : t + 1])
                n2 = nx.rmsnorm_forward(x, self.v(f"{p}.norm2"), NORM_EPS)[0]
                xa = self._step_attn(f"{p}.cross", n2, *cross[i])
                site = HookSite("cross_attention_out", i)
                if site in edits:
                    xa = _apply_edit(edits[site], xa)
                x = x + xa
                n3 = nx.rmsnorm_forward(x, self.v(f"{p}.norm3"), NORM_EPS)[0]
                x = x + nx.gelu(n3 @ self.v(f"{p}.w1")) @ self.v(f"{p}.w2")
                site = HookSite("decoder_block_out", i)
                if site in edits:
                    x = _apply_edit(edits[site], x)
            y = nx.rmsnorm_forward(x, self.v("dec_final"), NORM_EPS)[0]
            logits = (y @ self.v("w_out"))[:, :n_bins].astype(np.float64)
            if temperature <= 0:
                tok = np.argmax(logits, axis=1)
            else:
                probs = nx.softmax_rows(logits / temperature)
                cdf = np.cumsum(probs, axis=1)
                thresh = uniforms[:, t : t + 1] * cdf[:, -1:]
                tok = np.minimum((cdf <= thresh).sum(axis=1), n_bins - 1)
            out[:, t] = tok
        return out

    # -- checkpoints -------------------------------------------------------

    def save(self, path) -> None:
        buf = io.BytesIO()
        meta = json.dumps(self.cfg.to_dict(), sort_keys=True).encode()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
        buf.write(meta)
        buf.write(struct.pack("<I", len(self.params)))
        for name, p in self.params.items():
            raw = name.encode()
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", p.value.ndim))
            buf.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            buf.write(p.value.astype("<f4").tobytes())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Forecaster":
        data = Path(path).read_bytes()
        if data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
        version, meta_len = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 12
        cfg = ModelConfig(**json.loads(data[pos : pos + meta_len]))
        pos += meta_len
        model = cls(cfg, dtype=np.float32)
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape))
            if pos + 4 * count > len(data):
                raise CheckpointError(f"{path}: truncated at byte {pos}")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            if name not in model.params or model.params[name].shape != arr.shape:
                raise CheckpointError(f"{path}: unexpected parameter {name} {shape}")
            model.params[name] = Parameter(arr.astype(np.float32), name=name)
        return model


def _apply_edit(edit: Edit, act: np.ndarray) -> np.ndarray:
    new = edit(act)
    if new is None or np.shape(new) != act.shape:
        raise PatchError(f"edit changed activation shape {act.shape} -> {np.shape(new)}")
    return np.asarray(new, dtype=act.dtype)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def batch_arrays(tws: list[TokenizedWindow], pad_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ctx = np.stack([tw.context_tokens for tw in tws])
    tgt = np.stack([tw.target_tokens for tw in tws])
    dec_in = np.concatenate([np.full((len(tws), 1), pad_id, dtype=tgt.dtype), tgt[:, :-1]], axis=1)
    return ctx, dec_in, tgt


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean token cross-entropy and its gradient with respect to ``logits``."""
    lp = nx.log_softmax(logits.astype(np.float64))
    n = targets.size
    flat = lp.reshape(-1, lp.shape[-1])
    idx = targets.reshape(-1)
    loss = -flat[np.arange(n), idx].mean()
    grad = np.exp(flat)
    grad[np.arange(n), idx] -= 1.0
    return float(loss), (grad / n).reshape(logits.shape).astype(logits.dtype)


def loss_and_grad(model: Forecaster, tws: list[TokenizedWindow], pad_id: int) -> float:
    ctx, dec_in, tgt = batch_arrays(tws, pad_id)
    logits, cache = model.forward(ctx, dec_in, keep_cache=True)
    loss, dlogits = cross_entropy(logits, tgt)
    model.backward(dlogits, cache)
    return loss


def evaluate_loss(model: Forecaster, tws: list[TokenizedWindow], pad_id: int, batch: int = 64) -> float:
    total, count = 0.0, 0
    for s in range(0, len(tws), batch):
        chunk = tws[s : s + batch]
        ctx, dec_in, tgt = batch_arrays(chunk, pad_id)
        loss, _ = cross_entropy(model.forward(ctx, dec_in), tgt)
        total += loss * tgt.size
        count += tgt.size
    return total / count


def train(
    model: Forecaster,
    tws: list[TokenizedWindow],
    steps: int,
    batch: int,
    schedule: LrSchedule,
    pad_id: int,
    seed: int = 0,
    clip: float = 1.0,
    log_every: int = 0,
) -> TrainLog:
    if not tws:
        raise ValueError("no training windows")
    log_ = TrainLog()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(tws))
    cursor = 0
    params = list(model.params.values())
    for step in range(steps):
        if cursor + batch > len(order):
            order = rng.permutation(len(tws))
            cursor = 0
        idx = order[cursor : cursor + batch]
        cursor += batch
        model.zero_grad()
        loss = loss_and_grad(model, [tws[i] for i in idx], pad_id)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at step {step}", step)
        nx.clip_grad_norm(params, clip)
        lr = schedule(step)
        try:
            for p in params:
                nx.adam_step(p, lr)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} at step {step}", step) from exc
        log_.losses.append(loss)
        log_.lrs.append(lr)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, loss, lr)
    return log_


# ---------------------------------------------------------------------------
# forecasting, capture and patching
# ---------------------------------------------------------------------------


def window_seed(seed: int, window_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(window_id.encode())])


def _window_id(tw: TokenizedWindow, i: int) -> str:
    return tw.window.window_id if tw.window is not None else f"#{i}"


def _run_patched(
    model: Forecaster,
    tws: list[TokenizedWindow],
    n_samples: int,
    temperature: float,
    uniforms: np.ndarray,
    tok_cfg: TokenizerConfig,
    site: HookSite | None,
    edit: Edit | None,
) -> list[ForecastSampleSet]:
    ctx = np.stack([tw.context_tokens for tw in tws])
    B, C = ctx.shape
    enc_edit = site is not None and site.on_encoder
    stop = site.block_index + 1 if enc_edit else None
    h = model.run_encoder(model.embed_context(ctx), 0, stop)
    if enc_edit:
        D = h.shape[-1]
        h = _apply_edit(edit, h.reshape(B * C, D)).reshape(B, C, D)
        h = model.run_encoder(h, stop)
    mem = np.repeat(model.encoder_memory(h), n_samples, axis=0)
    edits = {site: edit} if site is not None and not enc_edit else None
    toks = model.sample_tokens(mem, uniforms.reshape(B * n_samples, -1), temperature, tok_cfg.n_bins,
                               edits, tok_cfg.pad_id)
    toks = toks.reshape(B, n_samples, -1)
    return [
        ForecastSampleSet(dequantize(toks[b], tw.scale, tok_cfg), tw, toks[b]) for b, tw in enumerate(tws)
    ]


def forward_patch(
    model: Forecaster,
    tw: TokenizedWindow,
    site: HookSite | None,
    edit: Edit | None,
    n_samples: int,
    temperature: float,
    seed: int,
    tok_cfg: TokenizerConfig,
    pred_len: int | None = None,
) -> ForecastSampleSet:
    """Forecast one window with the activation at ``site`` replaced by ``edit(act)``.

    Encoder-site edits see the ``(C, d_model)`` block output once; decoder-site
    edits see the ``(n_samples, d_model)`` rows of each newly decoded position.
    """
    if site is not None:
        site.validate(model.cfg)
    H = pred_len or len(tw.target_tokens)
    u = np.random.default_rng(seed).random((1, n_samples, H))
    return _run_patched(model, [tw], n_samples, temperature, u, tok_cfg, site, edit)[0]


def forecast(model, tw, n_samples, temperature, seed, tok_cfg, pred_len=None) -> ForecastSampleSet:
    return forward_patch(model, tw, None, None, n_samples, temperature, seed, tok_cfg, pred_len)


def batch_uniforms(tws: list[TokenizedWindow], n_samples: int, pred_len: int, seed: int) -> np.ndarray:
    """Per-window uniforms derived from ``(seed, window id)`` only."""
    return np.stack([
        np.random.default_rng(window_seed(seed, _window_id(tw, i))).random((n_samples, pred_len))
        for i, tw in enumerate(tws)
    ])


def forecast_batch(
    model: Forecaster,
    tws: list[TokenizedWindow],
    n_samples: int,
    temperature: float,
    seed: int,
    tok_cfg: TokenizerConfig,
    site: HookSite | None = None,
    edit: Edit | None = None,
    pred_len: int | None = None,
    chunk: int = 64,
) -> list[ForecastSampleSet]:
    """Batched ``forward_patch``; encoder-site edits see all windows' rows stacked."""
    if site is not None:
        site.validate(model.cfg)
    H = pred_len or len(tws[0].target_tokens)
    out: list[ForecastSampleSet] = []
    for s in range(0, len(tws), chunk):
        part = tws[s : s + chunk]
        u = batch_uniforms(part, n_samples, H, seed)
        out.extend(_run_patched(model, part, n_samples, temperature, u, tok_cfg, site, edit))
    return out


def forward_capture(
    model: Forecaster, tws: TokenizedWindow | list[TokenizedWindow], sites: Iterable[HookSite], pad_id: int
) -> dict[HookSite, np.ndarray]:
    """Teacher-forced pass recording activations at ``sites``.

    Encoder sites yield one row per context position, decoder and
    cross-attention sites one row per target position; windows are stacked
    in order.
    """
    single = isinstance(tws, TokenizedWindow)
    tws = [tws] if single else list(tws)
    sites = list(sites)
    for s in sites:
        s.validate(model.cfg)
    captured: dict[HookSite, np.ndarray] = {}

    def recorder(site):
        def hook(act):
            captured[site] = act.reshape(-1, act.shape[-1]).copy()
            return act

        return hook

    if sites:
        ctx, dec_in, _ = batch_arrays(tws, pad_id)
        model.forward(ctx, dec_in, hooks={s: recorder(s) for s in sites})
    return {s: captured[s] for s in sites}
