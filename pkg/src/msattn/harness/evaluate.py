"""Passkey accuracy and perplexity evaluation."""
from __future__ import annotations

import logging
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from ..errors import InvalidInput
from ..model import TransformerLM, with_config
from ..positional import PosEncoding
from ..recursion import ScaleSpec, forward_recursive
from .data import PasskeySpec, Vocab, gen_passkey

log = logging.getLogger(__name__)


def inference_encoding(enc: Optional[PosEncoding], scale: Optional[float] = None,
                       modulus: Optional[int] = None) -> Optional[PosEncoding]:
    """Evaluation-time encoding: zero shift, optional NTK scale and modulus overrides."""
    if enc is None:
        return None
    changes = {"randomp": 0}
    if scale is not None and enc.kind in ("ntk", "crd_ntk"):
        changes["ntk_scale"] = float(scale)
    if modulus is not None and enc.kind == "crd_ntk":
        changes["modulus"] = int(modulus)
    return replace(enc, **changes)


def _eval_model(model: TransformerLM, length: int, attention: Optional[str]):
    changes = {}
    if length > model.cfg.max_seq:
        changes["max_seq"] = length
    if attention is not None and attention != model.cfg.attention:
        changes["attention"] = attention
    return with_config(model, **changes) if changes else model


def greedy_decode(model: TransformerLM, prompts, steps: int, enc=None, backend=None):
    """Append ``steps`` argmax tokens to each (equal-length) prompt row."""
    seq = np.asarray(prompts)
    out = []
    for _ in range(steps):
        logits = model.forward(seq, enc=enc, backend=backend)
        nxt = logits[:, -1].argmax(-1)
        out.append(nxt)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return np.stack(out, axis=1) if out else np.zeros((seq.shape[0], 0), dtype=np.int64)


def eval_passkey(model: TransformerLM, lengths: Sequence[int], trials: int = 20, key_len: int = 5,
                 filler: str = "landmark", position: Optional[float] = None, seed: int = 0,
                 enc: Optional[PosEncoding] = None, memory_budget: int = 8192, backend=None,
                 attention: Optional[str] = None, vocab: Optional[Vocab] = None) -> list:
    """Exact-match passkey accuracy per length.

    Trial ``i`` at length ``L`` uses seed ``(seed, L, i)``. Lengths above
    ``memory_budget`` produce a record with ``skipped=True`` and no accuracy.
    """
    vocab = vocab or Vocab(model.cfg.vocab)
    enc = inference_encoding(model.cfg.pos) if enc is None else enc
    results = []
    for L in lengths:
        if L > memory_budget:
            log.warning("passkey length %d exceeds memory budget %d; skipped", L, memory_budget)
            results.append({"length": L, "accuracy": None, "trials": 0, "skipped": True})
            continue
        samples = [gen_passkey(PasskeySpec(L, key_len, position, filler), np.random.default_rng([seed, L, i]), vocab)
                   for i in range(trials)]
        if key_len == 0:
            results.append({"length": L, "accuracy": 1.0, "trials": trials, "skipped": False})
            continue
        m = _eval_model(model, L, attention)
        prompts = np.stack([s.tokens[:s.prompt_len] for s in samples])
        pred = greedy_decode(m, prompts, key_len, enc=enc, backend=backend)
        answers = np.stack([s.answer for s in samples])
        hits = np.all(pred == answers, axis=1)
        results.append({"length": L, "accuracy": float(hits.mean()), "trials": trials, "skipped": False})
    return results


def eval_ppl(model: TransformerLM, tokens, lengths: Sequence[int], windows: int = 1,
             enc: Optional[PosEncoding] = None, backend=None, attention: Optional[str] = None,
             recursive: bool = False, chunk: int = 256, scales: Sequence[ScaleSpec] = (),
             max_range: Optional[int] = None, memory_budget: Optional[int] = None) -> list:
    """Perplexity per context length over up to ``windows`` disjoint windows.

    A window of length ``L`` scores ``L`` next-token predictions from
    ``L + 1`` tokens; a corpus shorter than that is used whole and the
    record's ``length`` reports the truncated size.
    """
    stream = np.asarray(tokens, dtype=np.int64).ravel()
    if stream.size < 2:
        raise InvalidInput("perplexity needs a corpus of at least two tokens")
    enc = inference_encoding(model.cfg.pos) if enc is None else enc
    results = []
    for L in lengths:
        if memory_budget is not None and L > memory_budget:
            log.warning("ppl length %d exceeds memory budget %d; skipped", L, memory_budget)
            results.append({"length": L, "ppl": None, "skipped": True, "windows": 0})
            continue
        eff = min(L, stream.size - 1)
        count = max(1, min(windows, (stream.size - 1) // eff))
        rows = np.stack([stream[i * eff:i * eff + eff + 1] for i in range(count)])
        x, y = rows[:, :-1], rows[:, 1:]
        m = _eval_model(model, eff, attention)
        if recursive:
            logits, _ = forward_recursive(m, x, chunk, scales, max_range, enc=enc,
                                          use_ms=m.cfg.attention == "ms", backend=backend)
        else:
            logits = m.forward(x, enc=enc, backend=backend)
        lg = logits.astype(np.float64)
        mx = lg.max(-1, keepdims=True)
        lse = (mx + np.log(np.exp(lg - mx).sum(-1, keepdims=True)))[..., 0]
        nll = lse - np.take_along_axis(lg, y[..., None], -1)[..., 0]
        results.append({"length": int(eff), "requested": int(L), "ppl": float(np.exp(nll.mean())),
                        "skipped": False, "windows": int(count)})
    return results
