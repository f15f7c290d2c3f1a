"""Toy pre-norm decoder-only transformer in numpy with explicit backward.

Blocks are ``x + Wo·attn(RMSNorm(x))`` followed by ``x + W2·gelu(W1·RMSNorm(x))``.
Attention is MS attention (or dense, for evaluation). Weights use the
``x @ W`` convention. Low-rank adapters add ``A @ B`` to a frozen base weight.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from math import sqrt
from typing import Optional

import numpy as np

from . import ms_attention as msa
from .errors import InvalidConfig, InvalidInput
from .ms_attention import MsConfig
from .positional import PosEncoding

PROJECTIONS = ("wq", "wk", "wv", "wo")
FINETUNE_VARIANTS = {
    "ko": ("wk", "wo"),
    "qk": ("wq", "wk"),
    "q_only": ("wq",),
    "qkvo": PROJECTIONS,
}


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    warmup: int = 0
    decay_steps: int = 0
    min_lr_ratio: float = 0.1


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    head_dim: int = 32
    vocab: int = 512
    max_seq: int = 256
    mlp_ratio: int = 4
    attention: str = "ms"
    ms: MsConfig = field(default_factory=MsConfig)
    pos: Optional[PosEncoding] = None
    dtype: str = "float32"
    init_std: float = 0.02
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.vocab < 2:
            raise InvalidConfig("vocab must be >= 2")
        if self.layers < 1 or self.heads < 1 or self.head_dim < 1:
            raise InvalidConfig("layers, heads and head_dim must be positive")
        if self.attention not in ("ms", "dense"):
            raise InvalidConfig("attention must be 'ms' or 'dense'")
        if self.pos is not None and self.pos.dim != self.head_dim:
            raise InvalidConfig("position encoding dim must equal head_dim")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig("dtype must be float32 or float64")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ms"] = self.ms.to_dict()
        d["pos"] = None if self.pos is None else self.pos.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["ms"] = MsConfig(**d["ms"]) if isinstance(d.get("ms"), dict) else d.get("ms", MsConfig())
        if isinstance(d.get("pos"), dict):
            d["pos"] = PosEncoding.from_dict(d["pos"])
        return cls(**d)


@dataclass
class LoraAdapter:
    target: str
    A: np.ndarray
    B: np.ndarray

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def delta(self) -> np.ndarray:
        return self.A @ self.B


# --------------------------------------------------------------------------
# primitive layers


def rmsnorm_fwd(x, g, eps):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * g, (x, r, g)


def rmsnorm_bwd(dy, cache):
    x, r, g = cache
    u = dy * g
    D = x.shape[-1]
    dx = r * u - x * (r**3) * np.sum(u * x, axis=-1, keepdims=True) / D
    dg = np.sum(dy * x * r, axis=tuple(range(dy.ndim - 1)))
    return dx, dg


_GELU_C = sqrt(2.0 / np.pi)


def gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    dt = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def cross_entropy(logits, targets, weights=None):
    """Mean (weighted) next-token NLL and d loss / d logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = np.ones(nll.shape, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    total = w.sum()
    if total <= 0:
        raise InvalidInput("loss weights sum to zero")
    loss = float((nll * w).sum() / total)
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1, -1)
    dlogits *= (w / total)[..., None]
    return loss, dlogits


# --------------------------------------------------------------------------
# model


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    D, F, V = cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.vocab
    std = cfg.init_std
    out_std = std / sqrt(2 * cfg.layers)
    p = {"tok_emb": rng.normal(0, std, (V, D))}
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        p[pre + "attn_norm"] = np.ones(D)
        p[pre + "wq"] = rng.normal(0, std, (D, D))
        p[pre + "wk"] = rng.normal(0, std, (D, D))
        p[pre + "wv"] = rng.normal(0, std, (D, D))
        p[pre + "wo"] = rng.normal(0, out_std, (D, D))
        p[pre + "mlp_norm"] = np.ones(D)
        p[pre + "w1"] = rng.normal(0, std, (D, F))
        p[pre + "w2"] = rng.normal(0, out_std, (F, D))
    p["final_norm"] = np.ones(D)
    p["lm_head"] = rng.normal(0, std, (D, V))
    return {k: v.astype(dt) for k, v in p.items()}


def reduced_finetune_mask(cfg: ModelConfig, variant: str) -> dict:
    """Projection names that get adapters, and the always-trainable names.

    Returns ``{"adapters": [(layer, proj), ...], "trainable": [...]}``;
    embeddings and all norm gains stay trainable.
    """
    if variant not in FINETUNE_VARIANTS:
        raise InvalidConfig(f"unknown fine-tune variant {variant!r}; expected one of {sorted(FINETUNE_VARIANTS)}")
    projs = FINETUNE_VARIANTS[variant]
    adapters = [(i, p) for i in range(cfg.layers) for p in projs]
    trainable = ["tok_emb", "final_norm"]
    for i in range(cfg.layers):
        trainable += [f"layers.{i}.attn_norm", f"layers.{i}.mlp_norm"]
    return {"adapters": adapters, "trainable": trainable}


class TransformerLM:
    def __init__(self, cfg: ModelConfig, params: Optional[dict] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.trainable = set(self.params)
        self.adapters = {}
        self._cache = None

    # -- adapters --------------------------------------------------------

    def attach_lora(self, variant: str, rank: int, seed: int = 0):
        """Freeze the base model and add rank-``rank`` adapters per ``variant``."""
        if rank < 1:
            raise InvalidConfig("LoRA rank must be >= 1")
        spec = reduced_finetune_mask(self.cfg, variant)
        rng = np.random.default_rng(seed)
        dt = np.dtype(self.cfg.dtype)
        D = self.cfg.dim
        self.trainable = set(spec["trainable"])
        for i, proj in spec["adapters"]:
            name = f"layers.{i}.{proj}"
            a, b = name + ".lora_a", name + ".lora_b"
            self.params[a] = rng.normal(0, 1.0 / sqrt(D), (D, rank)).astype(dt)
            self.params[b] = np.zeros((rank, D), dtype=dt)
            self.adapters[name] = LoraAdapter(proj, self.params[a], self.params[b])
            self.trainable |= {a, b}
        return self

    def weight(self, name):
        w = self.params[name]
        if name + ".lora_a" in self.params:
            w = w + self.params[name + ".lora_a"] @ self.params[name + ".lora_b"]
        return w

    def merged_params(self) -> dict:
        """Base parameters with adapters folded in."""
        out = {k: v for k, v in self.params.items() if ".lora_" not in k}
        for name in self.adapters:
            out[name] = self.weight(name)
        return out

    # -- forward / backward ---------------------------------------------

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.cfg.heads, self.cfg.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, n, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)

    def forward(self, tokens, positions=None, randomp=None, routing=None, enc=None, keep=False,
                backend=None, counter=None):
        """Next-token logits (b, n, V).

        ``routing`` (list of per-layer plans from ``last_routing``) freezes the
        MS selection; ``enc`` overrides the configured position encoding.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
            raise InvalidInput("token id outside the vocabulary")
        if tokens.shape[1] > cfg.max_seq:
            raise InvalidInput(f"sequence of {tokens.shape[1]} tokens exceeds max_seq={cfg.max_seq}")
        P = self.params
        enc = cfg.pos if enc is None else enc
        x = P["tok_emb"][tokens]
        caches, plans = [], []
        for i in range(cfg.layers):
            pre = f"layers.{i}."
            xn, c_n1 = rmsnorm_fwd(x, P[pre + "attn_norm"], cfg.norm_eps)
            W = {p: self.weight(pre + p) for p in PROJECTIONS}
            q, k, v = (self._split(xn @ W[p]) for p in ("wq", "wk", "wv"))
            if cfg.attention == "ms":
                plan = None if routing is None else routing[i]
                o, actx = msa.ms_attention(q, k, v, cfg.ms, enc, positions, randomp, backend=backend,
                                           counter=counter, plan=plan, return_context=True)
                plans.append(actx.plan)
            else:
                if keep:
                    raise InvalidConfig("dense attention path is evaluation-only")
                o = msa.dense_causal_oracle(q, k, v, enc, positions, randomp)
                actx = None
            om = self._merge(o)
            x = x + om @ W["wo"]
            xn2, c_n2 = rmsnorm_fwd(x, P[pre + "mlp_norm"], cfg.norm_eps)
            h1 = xn2 @ P[pre + "w1"]
            g, c_g = gelu_fwd(h1)
            x = x + g @ P[pre + "w2"]
            if keep:
                caches.append((c_n1, xn, W, actx, om, c_n2, xn2, c_g, g))
        xf, c_f = rmsnorm_fwd(x, P["final_norm"], cfg.norm_eps)
        logits = xf @ P["lm_head"]
        self.last_routing = plans
        self._cache = (tokens, caches, c_f, xf) if keep else None
        return logits

    def backward(self, dlogits) -> dict:
        """Gradients of every trainable parameter given d loss / d logits."""
        if self._cache is None:
            raise RuntimeError("forward(..., keep=True) must run before backward")
        cfg = self.cfg
        P = self.params
        tokens, caches, c_f, xf = self._cache
        T = self.trainable
        grads = {}

        def acc(name, g):
            if name in T:
                grads[name] = grads.get(name, 0) + g

        def flat(a):
            return a.reshape(-1, a.shape[-1])

        def linear_grad(name, x, dy):
            """Route d(x @ W_eff) into base weight and adapters."""
            dw = flat(x).T @ flat(dy)
            acc(name, dw)
            a, b = name + ".lora_a", name + ".lora_b"
            if a in P:
                acc(a, dw @ P[b].T)
                acc(b, P[a].T @ dw)

        acc("lm_head", flat(xf).T @ flat(dlogits))
        dxf = dlogits @ P["lm_head"].T
        dx, dg = rmsnorm_bwd(dxf, c_f)
        acc("final_norm", dg)
        for i in reversed(range(cfg.layers)):
            pre = f"layers.{i}."
            c_n1, xn, W, actx, om, c_n2, xn2, c_g, g = caches[i]
            # MLP
            acc(pre + "w2", flat(g).T @ flat(dx))
            dg_ = dx @ P[pre + "w2"].T
            dh1 = gelu_bwd(dg_, c_g)
            acc(pre + "w1", flat(xn2).T @ flat(dh1))
            dxn2 = dh1 @ P[pre + "w1"].T
            dxr, dgn = rmsnorm_bwd(dxn2, c_n2)
            acc(pre + "mlp_norm", dgn)
            dx = dx + dxr
            # attention
            linear_grad(pre + "wo", om, dx)
            dom = dx @ W["wo"].T
            dq, dk, dv = msa.backward(actx, self._split(dom))
            dxn = 0
            for p, dproj in (("wq", dq), ("wk", dk), ("wv", dv)):
                dproj = self._merge(dproj)
                linear_grad(pre + p, xn, dproj)
                dxn = dxn + dproj @ W[p].T
            dxr, dgn = rmsnorm_bwd(dxn, c_n1)
            acc(pre + "attn_norm", dgn)
            dx = dx + dxr
        if "tok_emb" in T:
            demb = np.zeros_like(P["tok_emb"])
            np.add.at(demb, tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
            grads["tok_emb"] = demb
        self._cache = None
        return grads

    def loss_and_grads(self, tokens, targets, weights=None, **fwd):
        logits = self.forward(tokens, keep=True, **fwd)
        loss, dlogits = cross_entropy(logits, np.asarray(targets), weights)
        return loss, self.backward(dlogits)

    def loss(self, tokens, targets, weights=None, **fwd):
        logits = self.forward(tokens, **fwd)
        return cross_entropy(logits, np.asarray(targets), weights)[0]


def clone(model: TransformerLM) -> TransformerLM:
    other = TransformerLM(model.cfg, {k: v.copy() for k, v in model.params.items()})
    other.trainable = set(model.trainable)
    for name, ad in model.adapters.items():
        other.adapters[name] = LoraAdapter(ad.target, other.params[name + ".lora_a"], other.params[name + ".lora_b"])
    return other


def with_config(model: TransformerLM, **changes) -> TransformerLM:
    """Same parameters (shared, not copied) under a modified config."""
    other = TransformerLM(replace(model.cfg, **changes), model.params)
    other.trainable = model.trainable
    other.adapters = model.adapters
    return other
