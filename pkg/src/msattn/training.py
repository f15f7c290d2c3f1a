"""AdamW training loop, train state and checkpoint (manifest + fp32 blob) I/O."""
from __future__ import annotations

import json
import math
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInput, NonFiniteLoss
from .model import ModelConfig, OptimConfig, TransformerLM
from .positional import growth_schedule

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
BLOB = "tensors.bin"


@dataclass
class TrainState:
    seed: int = 0
    step: int = 0
    tokens_seen: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)


class AdamW:
    """Decoupled weight decay Adam; decay applies to matrices only."""

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg

    def lr_at(self, step):
        c = self.cfg
        if c.warmup and step < c.warmup:
            return c.lr * (step + 1) / c.warmup
        if c.decay_steps <= c.warmup:
            return c.lr
        frac = min(1.0, (step - c.warmup) / (c.decay_steps - c.warmup))
        return c.lr * (c.min_lr_ratio + (1 - c.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))

    def step(self, params: dict, grads: dict, state: TrainState):
        c = self.cfg
        t = state.step + 1
        lr = self.lr_at(state.step)
        b1c = 1 - c.beta1**t
        b2c = 1 - c.beta2**t
        for name, g in grads.items():
            p = params[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = np.zeros_like(p)
                state.v[name] = np.zeros_like(p)
            v = state.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if c.weight_decay and p.ndim >= 2:
                p -= lr * c.weight_decay * p
            p -= (lr * (m / b1c) / (np.sqrt(v / b2c) + c.eps)).astype(p.dtype)


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= s
    return norm


def current_scale(model: TransformerLM, tokens_seen: int) -> Optional[float]:
    enc = model.cfg.pos
    if enc is None or enc.growth is None or enc.kind not in ("ntk", "crd_ntk"):
        return None
    return growth_schedule(tokens_seen, enc.growth)


def train(model: TransformerLM, corpus, state: TrainState, steps: int, optim: OptimConfig,
          batch: int = 1, seq_len: Optional[int] = None, callback: Optional[Callable] = None):
    """Run ``steps`` AdamW steps on batches from ``corpus``; returns the loss curve.

    ``corpus.sample(rng, batch, seq_len)`` yields (inputs, targets, weights).
    For ``crd_ntk`` every sequence gets a fresh shift in
    ``[0, modulus - seq_len)``; the NTK scale follows the growth schedule.
    """
    seq_len = seq_len or model.cfg.max_seq
    if seq_len > model.cfg.max_seq:
        raise InvalidInput("seq_len exceeds max_seq")
    opt = AdamW(optim)
    curve = []
    base_enc = model.cfg.pos
    for _ in range(steps):
        enc = base_enc
        scale = current_scale(model, state.tokens_seen)
        if scale is not None:
            enc = enc.with_scale(scale)
        x, y, w = corpus.sample(state.rng, batch, seq_len)
        randomp = None
        if enc is not None and enc.kind == "crd_ntk":
            max_start = max(1, enc.modulus - seq_len)
            randomp = state.rng.integers(0, max_start, size=batch)
        loss, grads = model.loss_and_grads(x, y, w, enc=enc, randomp=randomp)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            diag = {
                "step": state.step,
                "lr": opt.lr_at(state.step),
                "loss": loss,
                "grad_norms": {k: float(np.linalg.norm(g)) for k, g in grads.items()},
            }
            raise NonFiniteLoss(f"non-finite loss at step {state.step}", diag)
        gnorm = clip_grads(grads, optim.grad_clip)
        opt.step(model.params, grads, state)
        state.step += 1
        state.tokens_seen += int(x.size)
        curve.append(loss)
        if callback is not None:
            callback(state, loss, gnorm, scale)
    return curve


# --------------------------------------------------------------------------
# checkpoints


def _tensor_table(model: TransformerLM, state: Optional[TrainState]):
    items = [("param/" + k, v) for k, v in sorted(model.params.items())]
    if state is not None:
        items += [("adam_m/" + k, v) for k, v in sorted(state.m.items())]
        items += [("adam_v/" + k, v) for k, v in sorted(state.v.items())]
    return items


def save_checkpoint(path, model: TransformerLM, state: Optional[TrainState] = None, extra: Optional[dict] = None):
    """Write ``manifest.json`` and a little-endian fp32 ``tensors.bin`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / BLOB, "wb") as fh:
        for name, arr in _tensor_table(model, state):
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
            offset += data.nbytes
    manifest = {
        "format": "msattn-checkpoint/1",
        "config": model.cfg.to_dict(),
        "trainable": sorted(model.trainable),
        "adapters": sorted(model.adapters),
        "tensors": entries,
        "blob_bytes": offset,
        "extra": extra or {},
    }
    if state is not None:
        manifest.update(step=state.step, tokens_seen=state.tokens_seen, seed=state.seed,
                        rng_state=state.rng.bit_generator.state)
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, path / MANIFEST)
    return path


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; validates every tensor against the manifest."""
    from .model import LoraAdapter

    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise InvalidInput(f"blob size {len(blob)} != manifest {manifest['blob_bytes']}")
    cfg = ModelConfig.from_dict(manifest["config"])
    dt = np.dtype(cfg.dtype)
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 4 * count
        if end > len(blob):
            raise InvalidInput(f"tensor {e['name']} overruns the blob")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    model = TransformerLM(cfg, params)
    model.trainable = set(manifest["trainable"])
    for name in manifest["adapters"]:
        model.adapters[name] = LoraAdapter(name.rsplit(".", 1)[-1], params[name + ".lora_a"], params[name + ".lora_b"])
    state = None
    if "step" in manifest:
        state = TrainState(seed=manifest["seed"], step=manifest["step"], tokens_seen=manifest["tokens_seen"])
        state.rng.bit_generator.state = manifest["rng_state"]
        state.m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")}
        state.v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")}
    return model, state, manifest.get("extra", {})
