"""Rotary position encodings: RoPE, position interpolation, NTK base scaling
and the cyclic / randomly shifted / growing NTK variant (``crd_ntk``).

Angles are evaluated in float64 and the cos/sin tables cast to the input
dtype, so large ``position * theta`` products do not lose precision.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .errors import InvalidConfig

KINDS = ("rope", "pi", "ntk", "crd_ntk")


@dataclass(frozen=True)
class GrowthSchedule:
    initial_scale: float = 4096.0
    factor: float = 2.0
    tokens_per_step: int = 32 * 2**20

    def __post_init__(self):
        if self.tokens_per_step <= 0:
            raise InvalidConfig("growth.tokens_per_step must be positive")
        if self.initial_scale < 1 or self.factor < 1:
            raise InvalidConfig("growth scales must be >= 1")


@dataclass(frozen=True)
class PosEncoding:
    kind: str = "rope"
    dim: int = 64
    base: float = 10000.0
    pi_scale: float = 1.0
    ntk_scale: float = 1.0
    randomp: int = 0
    modulus: Optional[int] = None
    growth: Optional[GrowthSchedule] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown encoding kind {self.kind!r}; expected one of {KINDS}")
        if self.dim <= 0 or self.dim % 2:
            raise InvalidConfig(f"rotary dim must be even and positive, got {self.dim}")
        if self.base <= 1:
            raise InvalidConfig("base must exceed 1")
        if self.pi_scale < 1:
            raise InvalidConfig("pi_scale (lambda) must be >= 1")
        if self.ntk_scale < 1:
            raise InvalidConfig("ntk_scale must be >= 1")
        if self.randomp < 0:
            raise InvalidConfig("randomp must be >= 0")
        if self.kind == "crd_ntk" and (self.modulus is None or self.modulus <= 0):
            raise InvalidConfig("crd_ntk requires a positive modulus")
        if self.kind in ("ntk", "crd_ntk") and self.dim <= 2:
            raise InvalidConfig("NTK base scaling needs dim > 2")

    def with_scale(self, scale: float) -> "PosEncoding":
        return replace(self, ntk_scale=float(scale))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PosEncoding":
        d = dict(d)
        g = d.get("growth")
        if g is not None and not isinstance(g, GrowthSchedule):
            d["growth"] = GrowthSchedule(**g)
        return cls(**d)


def ntk_base(enc: PosEncoding) -> float:
    """``base * scale ** (d / (d - 2))``."""
    d = enc.dim
    if d <= 2:
        raise InvalidConfig("NTK base scaling needs dim > 2")
    return float(enc.base) * float(enc.ntk_scale) ** (d / (d - 2))


def effective_base(enc: PosEncoding) -> float:
    if enc.kind in ("ntk", "crd_ntk"):
        return ntk_base(enc)
    return float(enc.base)


def frequencies(enc: PosEncoding) -> np.ndarray:
    """theta_i = base' ** (-2i/d), i = 0 .. d/2-1, float64, strictly decreasing."""
    i = np.arange(enc.dim // 2, dtype=np.float64)
    return effective_base(enc) ** (-2.0 * i / enc.dim)


def effective_position(m, enc: PosEncoding, randomp=None) -> np.ndarray:
    """Map integer positions to the (real) positions fed to the rotation.

    ``randomp`` overrides ``enc.randomp`` and may be an array broadcastable
    against ``m`` (per-sequence shifts).
    """
    m = np.asarray(m)
    if np.any(m < 0):
        raise InvalidConfig("positions must be non-negative")
    if enc.kind == "pi":
        return m.astype(np.float64) / enc.pi_scale
    if enc.kind == "crd_ntk":
        shift = enc.randomp if randomp is None else np.asarray(randomp)
        return np.mod(m.astype(np.int64) + shift, enc.modulus).astype(np.float64)
    return m.astype(np.float64)


def rope_tables(positions, enc: PosEncoding, dtype=np.float32, randomp=None):
    """cos/sin tables of shape ``positions.shape + (d,)``, lane-duplicated."""
    pos = effective_position(positions, enc, randomp)
    ang = pos[..., None] * frequencies(enc)
    cos = np.repeat(np.cos(ang), 2, axis=-1).astype(dtype)
    sin = np.repeat(np.sin(ang), 2, axis=-1).astype(dtype)
    return cos, sin


def _swap_pairs(x):
    y = np.empty_like(x)
    y[..., 0::2] = x[..., 1::2]
    y[..., 1::2] = x[..., 0::2]
    return y


def _signed(sin):
    s = sin.copy()
    s[..., 1::2] *= -1
    return s


def apply_tables(x, cos, sin, transpose=False):
    """x * PC + swap(x) * PS with PS = [+sin, -sin, ...].

    ``transpose=True`` applies the inverse rotation (used by backward).
    """
    ps = _signed(sin)
    if transpose:
        ps = -ps
    return x * cos + _swap_pairs(x) * ps


def rope_apply(x, positions, enc: PosEncoding, randomp=None, transpose=False):
    """Rotate feature pairs of ``x`` (..., n, d) by token position.

    ``positions`` broadcasts against ``x.shape[:-1]``: either (n,), or (b, n)
    for x of shape (b, h, n, d) (a head axis is inserted automatically).
    """
    x = np.asarray(x)
    d = x.shape[-1]
    if d % 2:
        raise InvalidConfig(f"rotary dim must be even, got {d}")
    if d != enc.dim:
        raise InvalidConfig(f"encoding dim {enc.dim} does not match feature dim {d}")
    positions = np.asarray(positions)
    if x.ndim == 4 and positions.ndim == 2:
        positions = positions[:, None, :]
        if randomp is not None and np.ndim(randomp) == 1:
            randomp = np.asarray(randomp)[:, None, None]
    elif randomp is not None and np.ndim(randomp) == 1:
        randomp = np.asarray(randomp)[:, None]
    cos, sin = rope_tables(positions, enc, x.dtype, randomp)
    return apply_tables(x, cos, sin, transpose=transpose)


def growth_schedule(tokens_seen: int, growth: GrowthSchedule) -> float:
    if growth.tokens_per_step <= 0:
        raise InvalidConfig("tokens_per_step must be positive")
    if tokens_seen < 0:
        raise InvalidConfig("tokens_seen must be non-negative")
    return growth.initial_scale * growth.factor ** (tokens_seen // growth.tokens_per_step)


def sample_randomp(rng_seed, max_start: int, size=None):
    """Uniform shift(s) in [0, max_start). ``rng_seed`` may be a Generator."""
    if max_start < 1:
        raise InvalidConfig("max_start must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return rng.integers(0, max_start, size=size)
