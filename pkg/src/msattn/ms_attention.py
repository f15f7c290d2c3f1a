"""Merge-Select (MS) sparse attention.

Pipeline for q, k, v of shape (b, h, n, d):

1. right-pad ``n`` to a multiple of ``lcm(s_q * merges, s_k)``;
2. compress each Q region (``s_q`` tokens) and KV region (``s_k`` tokens) to
   one representative (mean, or one softmax refinement step from the mean);
3. score representatives by dot product, mask regions that are not strictly
   in the past, keep the top-k per Q region (local regions are appended,
   never scored);
4. optionally reorder Q regions by a base-``b`` score of their selections,
   then merge ``merges`` Q regions per group, interleave their ranked
   selections, deduplicate in rank order and keep ``topn`` KV regions;
5. rotate q/k with the position encoding (positions follow tokens) and run
   token-causal softmax attention of every group over its gathered KV tokens.

Routing runs on un-rotated q/k and is treated as a constant by ``backward``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from math import gcd, sqrt
from typing import Optional

import numpy as np

from . import kernels
from .errors import InvalidConfig, InvalidInput
from .positional import PosEncoding, apply_tables, rope_tables

REPR_MODES = ("mean", "semantic")


@dataclass(frozen=True)
class MsConfig:
    s_q: int = 16
    s_k: int = 16
    topk: int = 8
    merges: int = 1
    topn: int = 8
    force_local: bool = True
    permute: bool = False
    perm_base: float = 5.0
    perm_width: int = 10
    repr_mode: str = "mean"

    def __post_init__(self):
        for name in ("s_q", "s_k", "merges", "topk", "topn"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.s_q % self.s_k and self.s_k % self.s_q:
            raise InvalidConfig("one of s_q, s_k must divide the other")
        if self.topn > self.topk * self.merges:
            raise InvalidConfig("topn cannot exceed topk * merges")
        if self.perm_base < 2 or self.perm_width < 1:
            raise InvalidConfig("perm_base must be >= 2 and perm_width >= 1")
        if self.permute and self.perm_width > self.topk:
            raise InvalidConfig("perm_width must not exceed topk")
        if self.repr_mode not in REPR_MODES:
            raise InvalidConfig(f"repr_mode must be one of {REPR_MODES}")
        if self.force_local:
            if self.topk < self.n_local:
                raise InvalidConfig("topk must hold the local KV region(s)")
            if self.topn < self.merges * self.n_local:
                raise InvalidConfig("topn must be >= merges * locals per Q region when force_local")

    @property
    def n_local(self) -> int:
        """KV regions overlapping one Q region."""
        return max(1, self.s_q // self.s_k)

    @property
    def block(self) -> int:
        a, b = self.s_q * self.merges, self.s_k
        return a * b // gcd(a, b)

    def padded_length(self, n: int) -> int:
        return -(-n // self.block) * self.block

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttnBatch:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.q, self.k, self.v)}
        if len(shapes) != 1 or self.q.ndim != 4:
            raise InvalidInput(f"q, k, v must share a (b, h, n, d) shape, got {[a.shape for a in (self.q, self.k, self.v)]}")
        for a in (self.q, self.k, self.v):
            if not np.all(np.isfinite(a)):
                raise InvalidInput("non-finite values in attention inputs")

    @classmethod
    def trusted(cls, q, k, v):
        """Skip validation (arrays derived from an already validated batch)."""
        obj = cls.__new__(cls)
        obj.q, obj.k, obj.v = q, k, v
        return obj


@dataclass
class SelectIndex:
    raw: np.ndarray
    merged: Optional[np.ndarray] = None


@dataclass
class PermRecord:
    scores: np.ndarray
    forward: np.ndarray
    inverse: np.ndarray


@dataclass
class RoutingPlan:
    """Everything the attend step needs; reusable to freeze routing."""

    raw: np.ndarray
    merged: np.ndarray
    order: np.ndarray
    qtok: np.ndarray
    kvtok: np.ndarray
    n_pad: int
    perm: Optional[PermRecord] = None


class FlopCounter:
    """Tallies multiply-adds reported by the kernels and routing code."""

    def __init__(self):
        self.counts = {}

    def add(self, name, value):
        self.counts[name] = self.counts.get(name, 0) + int(value)

    def __getitem__(self, name):
        return self.counts.get(name, 0)


# --------------------------------------------------------------------------
# region geometry


def local_regions(r, cfg: MsConfig) -> np.ndarray:
    """KV region indices overlapping Q region(s) ``r``; shape r.shape + (n_local,)."""
    r = np.asarray(r, dtype=np.int64)
    if cfg.s_q >= cfg.s_k:
        per = cfg.s_q // cfg.s_k
        return r[..., None] * per + np.arange(per)
    return ((r * cfg.s_q) // cfg.s_k)[..., None]


def admissible_mask(n_sq: int, n_sk: int, cfg: MsConfig) -> np.ndarray:
    """(n_sq, n_sk) bool: KV region lies strictly before the routing bound.

    The bound is the Q region's first token; without permutation and with
    merges > 1 it is the first token of the region's merge group, so that no
    routing decision of a group can depend on keys inside the group.
    """
    r = np.arange(n_sq)
    if cfg.permute or cfg.merges == 1:
        bound = r * cfg.s_q
    else:
        bound = (r // cfg.merges) * cfg.merges * cfg.s_q
    last_excl = (np.arange(n_sk) + 1) * cfg.s_k
    return last_excl[None, :] <= bound[:, None]


def _pad_tokens(x, n_pad):
    n = x.shape[-2]
    if n_pad == n:
        return x
    pad = [(0, 0)] * x.ndim
    pad[-2] = (0, n_pad - n)
    return np.pad(x, pad)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidInput("non-finite values in attention inputs")


# --------------------------------------------------------------------------
# selection


def partition_and_compress(x, s: int, mode: str = "mean", valid_len: Optional[int] = None):
    """One representative per region of ``s`` tokens: (b, h, n, d) -> (b, h, n/s, d).

    Padding tokens (index >= ``valid_len``) are excluded; a region with no
    valid token gets a zero representative.
    """
    if s <= 0:
        raise InvalidConfig("region size must be positive")
    if mode not in REPR_MODES:
        raise InvalidConfig(f"repr mode must be one of {REPR_MODES}")
    x = np.asarray(x)
    _check_finite(x)
    n = x.shape[-2]
    valid_len = n if valid_len is None else valid_len
    n_pad = -(-n // s) * s
    x = _pad_tokens(x, n_pad)
    regions = x.reshape(x.shape[:-2] + (n_pad // s, s, x.shape[-1]))
    valid = (np.arange(n_pad) < valid_len).reshape(n_pad // s, s)
    w = valid.astype(x.dtype)
    count = w.sum(-1)
    mean = np.einsum("...rsd,rs->...rd", regions, w) / np.maximum(count, 1)[:, None].astype(x.dtype)
    if mode == "mean":
        return mean
    logits = np.einsum("...rsd,...rd->...rs", regions, mean) / x.dtype.type(sqrt(x.shape[-1]))
    logits = np.where(valid, logits, -np.inf)
    mx = np.max(logits, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0)
    p = np.exp(logits - mx)
    p = p / np.maximum(p.sum(-1, keepdims=True), np.finfo(x.dtype).tiny)
    return np.einsum("...rs,...rsd->...rd", p, regions)


def select_topk(q_repr, k_repr, cfg: MsConfig, counter: Optional[FlopCounter] = None):
    """Ranked KV region indices per Q region, shape (b, h, n_sq, topk).

    Scored picks come first in descending dot-product order (ties -> lower
    index); with ``force_local`` the last ``n_local`` columns hold the Q
    region's own KV region(s). Missing picks are -1.
    """
    n_sq, n_sk = q_repr.shape[-2], k_repr.shape[-2]
    scores = np.matmul(q_repr, np.swapaxes(k_repr, -1, -2))
    if counter is not None:
        counter.add("selection", int(np.prod(q_repr.shape[:-2])) * n_sq * n_sk * q_repr.shape[-1])
    mask = admissible_mask(n_sq, n_sk, cfg)
    scores = np.where(mask, scores, -np.inf)
    n_score = cfg.topk - cfg.n_local if cfg.force_local else cfg.topk
    n_take = min(n_score, n_sk)
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :n_take]
    picked = np.take_along_axis(scores, order, axis=-1)
    raw = np.where(np.isfinite(picked), order, -1).astype(np.int64)
    if n_take < n_score:
        pad = np.full(raw.shape[:-1] + (n_score - n_take,), -1, dtype=np.int64)
        raw = np.concatenate([raw, pad], axis=-1)
    if cfg.force_local:
        loc = np.broadcast_to(local_regions(np.arange(n_sq), cfg), raw.shape[:-1] + (cfg.n_local,))
        raw = np.concatenate([raw, loc], axis=-1)
    return raw


def _first_occurrence(a):
    """Bool mask marking the first occurrence of each value along the last axis."""
    idx = np.argsort(a, axis=-1, kind="stable")
    sa = np.take_along_axis(a, idx, axis=-1)
    first_sorted = np.ones(a.shape, dtype=bool)
    first_sorted[..., 1:] = sa[..., 1:] != sa[..., :-1]
    mask = np.empty(a.shape, dtype=bool)
    np.put_along_axis(mask, idx, first_sorted, axis=-1)
    return mask


def _compact(a, keep):
    """Move kept entries to the front (order preserved), fill the rest with -1."""
    order = np.argsort(~keep, axis=-1, kind="stable")
    out = np.take_along_axis(a, order, axis=-1)
    kept = np.take_along_axis(keep, order, axis=-1)
    return np.where(kept, out, -1)


def merge_indices(raw, cfg: MsConfig, order=None):
    """Merge the selections of ``merges`` Q regions per group -> (b, h, n_ms, topn).

    ``order`` is the Q-region order used for grouping (identity when None).
    Rows hold ranked non-local picks first, then the group's local regions,
    then -1 sentinels.
    """
    raw = np.asarray(raw, dtype=np.int64)
    lead, (n_sq, topk) = raw.shape[:-2], raw.shape[-2:]
    m = cfg.merges
    if n_sq % m:
        raise InvalidConfig(f"{n_sq} Q regions not divisible by merges={m}")
    if order is None:
        order = np.broadcast_to(np.arange(n_sq), lead + (n_sq,))
    rows = np.take_along_axis(raw, order[..., None], axis=-2)
    grouped = rows.reshape(lead + (n_sq // m, m, topk))
    inter = np.swapaxes(grouped, -1, -2).reshape(lead + (n_sq // m, topk * m))
    first = _first_occurrence(inter) & (inter >= 0)
    if not cfg.force_local:
        return _compact(inter, first)[..., : cfg.topn]

    nl = cfg.n_local
    loc = grouped[..., topk - nl:].reshape(lead + (n_sq // m, m * nl))
    loc = _compact(loc, _first_occurrence(loc))
    n_loc = np.sum(loc >= 0, axis=-1, keepdims=True)
    is_local = np.any(inter[..., :, None] == loc[..., None, :], axis=-1)
    nonlocal_ = _compact(inter, first & ~is_local)
    width = cfg.topn
    if nonlocal_.shape[-1] < width:
        pad = np.full(nonlocal_.shape[:-1] + (width - nonlocal_.shape[-1],), -1, dtype=np.int64)
        nonlocal_ = np.concatenate([nonlocal_, pad], axis=-1)
    slots = np.arange(width)
    head = np.where(slots < width - n_loc, nonlocal_[..., :width], -1)
    combined = np.concatenate([head, loc], axis=-1)
    return _compact(combined, combined >= 0)[..., :width]


def perm_score(raw, cfg: MsConfig, n_sk: int) -> PermRecord:
    """Base-``perm_base`` weighted score of each Q region's first picks, and the
    stable ascending sort order it induces."""
    raw = np.asarray(raw)
    w = cfg.perm_width
    if w > raw.shape[-1]:
        raise InvalidConfig("perm_width must not exceed topk")
    weights = float(cfg.perm_base) ** (w - np.arange(w, dtype=np.float64))
    picks = np.where(raw[..., :w] >= 0, raw[..., :w], 0).astype(np.float64)
    scores = picks @ weights / n_sk
    forward = np.argsort(scores, axis=-1, kind="stable")
    inverse = np.argsort(forward, axis=-1, kind="stable")
    return PermRecord(scores=scores, forward=forward, inverse=inverse)


def build_plan(q, k, cfg: MsConfig, valid_len: Optional[int] = None,
               counter: Optional[FlopCounter] = None) -> RoutingPlan:
    """Route padded q, k (b, h, n_pad, d) into a ``RoutingPlan``."""
    n_pad = q.shape[-2]
    if n_pad % cfg.block:
        raise InvalidInput(f"sequence length {n_pad} not padded to a multiple of {cfg.block}")
    q_repr = partition_and_compress(q, cfg.s_q, cfg.repr_mode, valid_len)
    k_repr = partition_and_compress(k, cfg.s_k, cfg.repr_mode, valid_len)
    raw = select_topk(q_repr, k_repr, cfg, counter)
    n_sq, n_sk = q_repr.shape[-2], k_repr.shape[-2]
    perm = None
    if cfg.permute:
        perm = perm_score(raw, cfg, n_sk)
        order = perm.forward
    else:
        order = np.broadcast_to(np.arange(n_sq), raw.shape[:-1])
    merged = merge_indices(raw, cfg, order)
    return _plan_from(raw, merged, order, cfg, n_pad, perm)


def _plan_from(raw, merged, order, cfg, n_pad, perm=None):
    lead = merged.shape[:-2]
    n_ms = merged.shape[-2]
    groups = np.asarray(order).reshape(lead + (n_ms, cfg.merges))
    qtok = (groups[..., None] * cfg.s_q + np.arange(cfg.s_q)).reshape(lead + (n_ms, cfg.merges * cfg.s_q))
    kv = merged[..., None] * cfg.s_k + np.arange(cfg.s_k)
    kvtok = np.where(merged[..., None] >= 0, kv, -1).reshape(lead + (n_ms, merged.shape[-1] * cfg.s_k))
    return RoutingPlan(raw=raw, merged=merged, order=np.asarray(order), qtok=qtok.astype(np.int64),
                       kvtok=kvtok.astype(np.int64), n_pad=n_pad, perm=perm)


# --------------------------------------------------------------------------
# attention


def _positions(positions, b, n, n_pad):
    if positions is None:
        pos = np.broadcast_to(np.arange(n_pad), (b, n_pad))
        return pos
    pos = np.asarray(positions, dtype=np.int64)
    if pos.ndim == 1:
        pos = np.broadcast_to(pos, (b, pos.shape[0]))
    if pos.shape != (b, n):
        raise InvalidInput(f"positions shape {pos.shape} does not match (b, n)=({b}, {n})")
    if n_pad > n:
        tail = pos[:, -1:] + 1 + np.arange(n_pad - n)
        pos = np.concatenate([pos, tail], axis=1)
    return pos


@dataclass
class AttnContext:
    """Saved state for ``backward``."""

    qr: np.ndarray
    kr: np.ndarray
    v: np.ndarray
    out: np.ndarray
    lse: np.ndarray
    plan: RoutingPlan
    cos: Optional[np.ndarray]
    sin: Optional[np.ndarray]
    n: int
    backend: object


def gather_and_attend(batch: AttnBatch, plan: RoutingPlan, cfg: MsConfig, enc: Optional[PosEncoding] = None,
                      positions=None, randomp=None, backend=None, counter=None, valid_len=None,
                      return_context=False):
    """Rotate q/k by position and attend every merged group over its gathered KV tokens.

    ``batch`` arrays must already be padded to ``plan.n_pad``; ``valid_len``
    is the unpadded length. Returns (b, h, n_pad, d) and, optionally, the
    backward context.
    """
    q, k, v = batch.q, batch.k, batch.v
    b, h, n_pad, d = q.shape
    n = n_pad if valid_len is None else valid_len
    cos = sin = None
    if enc is not None:
        pos = _positions(positions, b, n, n_pad)[:, None, :]
        rp = None if randomp is None else np.asarray(randomp).reshape(-1, 1, 1)
        cos, sin = rope_tables(pos, enc, q.dtype, rp)
        qr, kr = apply_tables(q, cos, sin), apply_tables(k, cos, sin)
    else:
        qr, kr = q, k
    kern = kernels.get_backend(backend)
    B = b * h
    out, lse = kern.attend_fwd(
        np.ascontiguousarray(qr.reshape(B, n_pad, d)),
        np.ascontiguousarray(kr.reshape(B, n_pad, d)),
        np.ascontiguousarray(v.reshape(B, n_pad, d)),
        plan.qtok.reshape(B, *plan.qtok.shape[-2:]),
        plan.kvtok.reshape(B, *plan.kvtok.shape[-2:]),
        1.0 / sqrt(d),
        counter,
    )
    if counter is not None:
        counter.add("gathered_kv_elements", int(np.prod(plan.kvtok.shape)) * d)
    if np.any(np.isneginf(lse[:, :n])):
        raise InvalidInput("a query token has no admissible keys (enable force_local)")
    out = out.reshape(b, h, n_pad, d)
    if not return_context:
        return out
    ctx = AttnContext(qr=qr, kr=kr, v=v, out=out, lse=lse.reshape(b, h, n_pad), plan=plan,
                      cos=cos, sin=sin, n=n, backend=kern)
    return out, ctx


def ms_attention(q, k, v, cfg: MsConfig, enc: Optional[PosEncoding] = None, positions=None, randomp=None,
                 backend=None, counter=None, plan: Optional[RoutingPlan] = None, return_context=False):
    """MS attention on (b, h, n, d) arrays; returns (b, h, n, d).

    Pass ``plan`` (e.g. ``ctx.plan`` of an earlier call) to reuse a routing.
    """
    batch = AttnBatch(np.asarray(q), np.asarray(k), np.asarray(v))
    n = batch.q.shape[-2]
    n_pad = cfg.padded_length(n)
    qp, kp, vp = (_pad_tokens(a, n_pad) for a in (batch.q, batch.k, batch.v))
    if plan is None:
        plan = build_plan(qp, kp, cfg, valid_len=n, counter=counter)
    elif plan.n_pad != n_pad:
        raise InvalidInput("routing plan was built for a different length")
    res = gather_and_attend(AttnBatch.trusted(qp, kp, vp), plan, cfg, enc, positions, randomp, backend, counter, valid_len=n,
                            return_context=return_context)
    if return_context:
        out, ctx = res
        return out[..., :n, :], ctx
    return res[..., :n, :]


def backward(ctx: AttnContext, dout):
    """Gradients of MS attention w.r.t. the un-rotated q, k and v (routing held fixed)."""
    b, h, n_pad, d = ctx.qr.shape
    dout = _pad_tokens(np.asarray(dout, dtype=ctx.qr.dtype), n_pad)
    B = b * h
    plan = ctx.plan
    dq, dk, dv = ctx.backend.attend_bwd(
        np.ascontiguousarray(ctx.qr.reshape(B, n_pad, d)),
        np.ascontiguousarray(ctx.kr.reshape(B, n_pad, d)),
        np.ascontiguousarray(ctx.v.reshape(B, n_pad, d)),
        plan.qtok.reshape(B, *plan.qtok.shape[-2:]),
        plan.kvtok.reshape(B, *plan.kvtok.shape[-2:]),
        1.0 / sqrt(d),
        np.ascontiguousarray(ctx.out.reshape(B, n_pad, d)),
        np.ascontiguousarray(ctx.lse.reshape(B, n_pad)),
        np.ascontiguousarray(dout.reshape(B, n_pad, d)),
    )
    dq, dk, dv = (a.reshape(b, h, n_pad, d) for a in (dq, dk, dv))
    if ctx.cos is not None:
        dq = apply_tables(dq, ctx.cos, ctx.sin, transpose=True)
        dk = apply_tables(dk, ctx.cos, ctx.sin, transpose=True)
    n = ctx.n
    return dq[..., :n, :], dk[..., :n, :], dv[..., :n, :]


def dense_causal_oracle(q, k, v, enc: Optional[PosEncoding] = None, positions=None, randomp=None,
                        return_lse=False, counter: Optional[FlopCounter] = None):
    """Full causal softmax attention with optional rotary encoding (test reference)."""
    q, k, v = (np.asarray(a) for a in (q, k, v))
    n, d = q.shape[-2], q.shape[-1]
    if enc is not None:
        if positions is None:
            positions = np.arange(n)
        pos = np.asarray(positions)
        if pos.ndim == 2 and q.ndim == 4:
            pos = pos[:, None, :]
        rp = None if randomp is None else np.asarray(randomp).reshape((-1,) + (1,) * (pos.ndim - 1))
        cos, sin = rope_tables(pos, enc, q.dtype, rp)
        q, k = apply_tables(q, cos, sin), apply_tables(k, cos, sin)
    s = np.matmul(q, np.swapaxes(k, -1, -2)) / q.dtype.type(sqrt(d))
    s = np.where(np.tril(np.ones((n, n), dtype=bool)), s, -np.inf)
    mx = s.max(-1, keepdims=True)
    p = np.exp(s - mx)
    l = p.sum(-1, keepdims=True)
    out = np.matmul(p / l, v)
    if counter is not None:
        counter.add("attention", 2 * int(np.prod(q.shape[:-2])) * n * n * d)
    if return_lse:
        return out, (mx + np.log(l))[..., 0]
    return out


def flop_account(n: int, cfg: MsConfig, d: int, heads: int = 1, itemsize: int = 4) -> dict:
    """Closed-form work per call: routing and attention multiply-adds, gathered K (or V) size."""
    elements = n // (cfg.s_q * cfg.merges) * cfg.topn * cfg.s_k * d
    per = {
        "selection_flops": n * n // (cfg.s_q * cfg.s_k) * d,
        "attention_flops": 2 * n * (cfg.topn * cfg.s_k) * d,
        "gathered_kv_elements": elements,
        "gathered_kv_bytes": elements * itemsize,
    }
    return {key: val * heads for key, val in per.items()}


def dense_flop_account(n: int, d: int, heads: int = 1) -> int:
    """Multiply-adds of full (masked-but-computed) attention: QK^T and PV."""
    return 2 * n * n * d * heads
