"""Scaled-down passkey extrapolation: CRD NTK against plain RoPE.

Two identical small models are trained on passkey prompts whose length
grows through a short curriculum ending at ``train_len``; both are then
scored at ``train_len`` and at twice that length. Only the position
encoding differs between them.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

from ..model import ModelConfig, OptimConfig, TransformerLM
from ..ms_attention import MsConfig
from ..positional import GrowthSchedule, PosEncoding
from ..training import TrainState, current_scale, train
from .data import PasskeyCorpus, Vocab
from .evaluate import eval_passkey, inference_encoding

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PasskeyRecipe:
    vocab: int = 64
    layers: int = 2
    heads: int = 4
    head_dim: int = 16
    init_std: float = 0.1
    ms: MsConfig = field(default_factory=lambda: MsConfig(s_q=16, s_k=16, topk=8, merges=1, topn=8))
    # (sequence length, steps, batch); the last phase runs at the training length
    phases: Tuple[Tuple[int, int, int], ...] = ((64, 1200, 16), (128, 800, 16), (256, 1500, 8))
    lr: float = 3e-3
    warmup: int = 50
    min_lr_ratio: float = 0.05
    key_len: int = 5
    modulus: int = 1024
    growth_factor: float = 2.0
    growth_stages: int = 3
    eval_lengths: Sequence[int] = (256, 512)
    trials: int = 20

    @property
    def train_tokens(self) -> int:
        return sum(n * steps * b for n, steps, b in self.phases)

    def encoding(self, kind: str) -> PosEncoding:
        if kind == "rope":
            return PosEncoding("rope", dim=self.head_dim)
        per = self.train_tokens // self.growth_stages + 1
        return PosEncoding("crd_ntk", dim=self.head_dim, modulus=self.modulus,
                           growth=GrowthSchedule(1.0, self.growth_factor, per))

    def model_config(self, kind: str) -> ModelConfig:
        return ModelConfig(layers=self.layers, heads=self.heads, head_dim=self.head_dim, vocab=self.vocab,
                           max_seq=max(self.eval_lengths), ms=self.ms, pos=self.encoding(kind),
                           init_std=self.init_std)


def train_passkey_model(recipe: PasskeyRecipe, kind: str, seed: int = 0,
                        callback=None) -> Tuple[TransformerLM, TrainState]:
    vocab = Vocab(recipe.vocab)
    model = TransformerLM(recipe.model_config(kind), seed=seed)
    state = TrainState(seed=seed + 1)
    total = sum(steps for _, steps, _ in recipe.phases)
    optim = OptimConfig(lr=recipe.lr, warmup=recipe.warmup, decay_steps=total, min_lr_ratio=recipe.min_lr_ratio)
    corpus = PasskeyCorpus(vocab, key_len=recipe.key_len)
    for seq_len, steps, batch in recipe.phases:
        train(model, corpus, state, steps, optim, batch=batch, seq_len=seq_len, callback=callback)
    return model, state


def passkey_extrapolation(recipe: Optional[PasskeyRecipe] = None, seed: int = 0,
                          kinds=("crd_ntk", "rope"), backend=None) -> dict:
    """``{kind: {length: accuracy}}`` for each position encoding in ``kinds``."""
    recipe = recipe or PasskeyRecipe()
    vocab = Vocab(recipe.vocab)
    out = {}
    for kind in kinds:
        t0 = time.perf_counter()
        model, state = train_passkey_model(recipe, kind, seed)
        enc = inference_encoding(model.cfg.pos, current_scale(model, state.tokens_seen))
        res = eval_passkey(model, recipe.eval_lengths, recipe.trials, recipe.key_len, seed=seed, enc=enc,
                           backend=backend, vocab=vocab)
        out[kind] = {r["length"]: r["accuracy"] for r in res}
        log.info("%s: %s (%.0fs)", kind, out[kind], time.perf_counter() - t0)
    return out


def quick_recipe(**changes) -> PasskeyRecipe:
    return replace(PasskeyRecipe(), **changes)
