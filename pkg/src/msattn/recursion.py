"""Chunked recursive inference with a multi-scale compressed history.

After each chunk the layer input ``X_i`` (pre-projection hidden states) is
compressed per scale: the trailing ``range`` tokens are mean-pooled in groups
of ``ratio`` and the scales concatenated. If the concatenation is wider than
``max_range`` the chunk is kept uncompressed. The next chunk attends to that
history and to itself (causally), and the two softmax outputs are blended by
their exp-sum masses, which equals one softmax over both key sets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt
from typing import Optional, Sequence

import numpy as np

from . import ms_attention as msa
from .errors import InvalidConfig, InvalidInput
from .positional import PosEncoding, apply_tables, rope_tables


@dataclass(frozen=True)
class ScaleSpec:
    ratio: int
    range: int

    def __post_init__(self):
        if self.ratio < 1:
            raise InvalidConfig("compression ratio must be >= 1")
        if self.range < 1 or self.range % self.ratio:
            raise InvalidConfig("range must be a positive multiple of ratio")

    @property
    def width(self) -> int:
        return self.range // self.ratio


def history_width(scales: Sequence[ScaleSpec], chunk: int, max_range: Optional[int] = None) -> int:
    """Width of the stored history (constant for a given configuration)."""
    max_range = max(s.range for s in scales) if max_range is None else max_range
    w = sum(s.width for s in scales)
    return chunk if w > max_range else w


def compress_chunk(x_chunk, scales: Sequence[ScaleSpec], positions=None, max_range: Optional[int] = None,
                   chunk: Optional[int] = None):
    """Multi-scale compression of a (b, n, D) chunk.

    Returns ``(xp, pos, valid)`` with xp (b, W, D), integer positions (b, W)
    (floor of member means) and a (W,) validity mask. A chunk shorter than a
    scale's range is pooled over what is available; unused slots are zero and
    masked. ``chunk`` is the configured chunk size (defaults to ``n``).
    """
    x = np.asarray(x_chunk)
    if x.ndim != 3:
        raise InvalidInput("chunk must be (b, n, D)")
    if not scales:
        raise InvalidConfig("at least one scale is required")
    b, n, D = x.shape
    chunk = n if chunk is None else chunk
    if n > chunk:
        raise InvalidInput(f"chunk of {n} tokens exceeds configured size {chunk}")
    pos = np.broadcast_to(np.arange(n) if positions is None else np.asarray(positions), (b, n)).astype(np.int64)
    max_range = max(s.range for s in scales) if max_range is None else max_range
    W = history_width(scales, chunk, max_range)
    xp = np.zeros((b, W, D), dtype=x.dtype)
    pp = np.zeros((b, W), dtype=np.int64)
    valid = np.zeros(W, dtype=bool)
    if W == chunk and sum(s.width for s in scales) > max_range:
        xp[:, :n], pp[:, :n], valid[:n] = x, pos, True
        return xp, pp, valid
    off = 0
    for s in scales:
        take = min(s.range, n)
        seg, sp = x[:, n - take:], pos[:, n - take:]
        groups = -(-take // s.ratio)
        full = groups * s.ratio
        w = np.zeros(full, dtype=x.dtype)
        w[:take] = 1
        if full > take:
            seg = np.concatenate([seg, np.zeros((b, full - take, D), dtype=x.dtype)], axis=1)
            sp = np.concatenate([sp, np.zeros((b, full - take), dtype=np.int64)], axis=1)
        w = w.reshape(groups, s.ratio)
        cnt = w.sum(-1)
        pooled = np.einsum("bgrd,gr->bgd", seg.reshape(b, groups, s.ratio, D), w) / cnt[:, None]
        psum = (sp.reshape(b, groups, s.ratio) * w.astype(np.int64)).sum(-1)
        xp[:, off:off + groups] = pooled
        pp[:, off:off + groups] = psum // cnt.astype(np.int64)
        valid[off:off + groups] = True
        off += s.width
    return xp, pp, valid


@dataclass
class RecurrentState:
    """Per-layer compressed history of the previous chunk (fixed-size buffers)."""

    x: np.ndarray
    positions: np.ndarray
    valid: np.ndarray
    chunks_seen: int = 0
    log_mass: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def empty(cls, batch: int, dim: int, scales, chunk: int, max_range=None, dtype=np.float32):
        W = history_width(scales, chunk, max_range)
        return cls(np.zeros((batch, W, dim), dtype=dtype), np.zeros((batch, W), dtype=np.int64),
                   np.zeros(W, dtype=bool))

    def update(self, x_chunk, scales, positions, max_range=None, chunk=None):
        xp, pp, valid = compress_chunk(x_chunk, scales, positions, max_range, chunk)
        if xp.shape != self.x.shape:
            raise InvalidInput("compressed history shape changed between chunks")
        self.x[...] = xp
        self.positions[...] = pp
        self.valid[...] = valid
        self.chunks_seen += 1

    @property
    def nbytes(self) -> int:
        return self.x.nbytes + self.positions.nbytes + self.valid.nbytes

    @property
    def is_empty(self) -> bool:
        return self.chunks_seen == 0


def _history_attention(q, k, v, valid, enc, q_pos, k_pos):
    """Unmasked (all-past) softmax attention over history keys, plus its log-mass."""
    d = q.shape[-1]
    if enc is not None:
        cq, sq = rope_tables(np.asarray(q_pos)[:, None, :], enc, q.dtype)
        ck, sk = rope_tables(np.asarray(k_pos)[:, None, :], enc, k.dtype)
        q, k = apply_tables(q, cq, sq), apply_tables(k, ck, sk)
    s = np.matmul(q, np.swapaxes(k, -1, -2)) / q.dtype.type(sqrt(d))
    s = np.where(valid, s, -np.inf)
    mx = s.max(-1, keepdims=True)
    p = np.exp(s - mx)
    l = p.sum(-1, keepdims=True)
    return np.matmul(p / l, v), (mx + np.log(l))[..., 0]


def current_attention(q, k, v, enc=None, positions=None, ms_cfg=None, backend=None):
    """Causal attention over the current chunk and its per-query log-mass."""
    if ms_cfg is None:
        return msa.dense_causal_oracle(q, k, v, enc, positions, return_lse=True)
    out, ctx = msa.ms_attention(q, k, v, ms_cfg, enc, positions, backend=backend, return_context=True)
    return out, ctx.lse[..., : q.shape[-2]]


def blend_weights(lse_prev, lse_cur):
    """History and current weights ``cc/(c+cc)`` and ``c/(c+cc)`` from log-masses."""
    w_prev = 1.0 / (1.0 + np.exp(lse_cur - lse_prev))
    return w_prev, 1.0 - w_prev


def recurrent_attend(q_next, state_kv, current_kv, enc: Optional[PosEncoding] = None, positions=None,
                     ms_cfg=None, backend=None):
    """Blend history and current-chunk attention for the queries of the next chunk.

    ``state_kv`` is ``(k_hist, v_hist, hist_positions, hist_valid)`` (already
    projected from the compressed hidden history) or None for the first
    chunk; ``current_kv`` is ``(k, v)``. Shapes are (b, h, ., d); positions
    are (b, n) global token positions of the current chunk.
    Returns ``(output, log_mass_history)``.
    """
    k, v = current_kv
    b, h, n, d = q_next.shape
    pos = np.broadcast_to(np.arange(n) if positions is None else np.asarray(positions), (b, n))
    o_cur, lse_cur = current_attention(q_next, k, v, enc, pos, ms_cfg, backend)
    if state_kv is None:
        return o_cur, None
    k_hist, v_hist, hist_pos, hist_valid = state_kv
    if not np.any(hist_valid):
        return o_cur, None
    o_prev, lse_prev = _history_attention(q_next, k_hist, v_hist, hist_valid, enc, pos, hist_pos)
    w_prev, w_cur = blend_weights(lse_prev, lse_cur)
    out = w_prev[..., None] * o_prev + w_cur[..., None] * o_cur
    return out.astype(q_next.dtype), lse_prev


def forward_recursive(model, tokens, chunk: int, scales: Sequence[ScaleSpec], max_range=None, enc=None,
                      use_ms=True, backend=None):
    """Logits of ``model`` computed chunk by chunk with per-layer recurrent states."""
    from .model import PROJECTIONS, gelu_fwd, rmsnorm_fwd

    cfg = model.cfg
    P = model.params
    enc = cfg.pos if enc is None else enc
    tokens = np.atleast_2d(np.asarray(tokens))
    b, n = tokens.shape
    dt = np.dtype(cfg.dtype)
    states = [RecurrentState.empty(b, cfg.dim, scales, chunk, max_range, dt) for _ in range(cfg.layers)]
    ms_cfg = cfg.ms if (use_ms and cfg.attention == "ms") else None
    outs = []
    for c0 in range(0, n, chunk):
        tk = tokens[:, c0:c0 + chunk]
        m = tk.shape[1]
        pos = np.broadcast_to(c0 + np.arange(m), (b, m))
        x = P["tok_emb"][tk]
        for i, st in enumerate(states):
            pre = f"layers.{i}."
            xn, _ = rmsnorm_fwd(x, P[pre + "attn_norm"], cfg.norm_eps)
            W = {p: model.weight(pre + p) for p in PROJECTIONS}
            q, k, v = (model._split(xn @ W[p]) for p in ("wq", "wk", "wv"))
            hist = None
            if not st.is_empty:
                hist = (model._split(st.x @ W["wk"]), model._split(st.x @ W["wv"]), st.positions, st.valid)
            o, st.log_mass = recurrent_attend(q, hist, (k, v), enc, pos, ms_cfg, backend)
            x = x + model._merge(o) @ W["wo"]
            xn2, _ = rmsnorm_fwd(x, P[pre + "mlp_norm"], cfg.norm_eps)
            g, _ = gelu_fwd(xn2 @ P[pre + "w1"])
            x = x + g @ P[pre + "w2"]
            st.update(xn, scales, pos, max_range, chunk)
        xf, _ = rmsnorm_fwd(x, P["final_norm"], cfg.norm_eps)
        outs.append(xf @ P["lm_head"])
    return np.concatenate(outs, axis=1), states
