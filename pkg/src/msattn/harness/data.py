"""Toy vocabulary, synthetic corpora and passkey task generation.

Passkey template (word-level, after the Landmark-attention prompt)::

    <bos> [filler ...] the pass key is D1 .. Dk . remember it . [filler ...]
    what is the pass key ? the pass key is | D1 .. Dk

Everything left of ``|`` is the prompt; the digits after it are the answer.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import InvalidConfig, InvalidInput

DIGITS = [str(i) for i in range(10)]
SPECIALS = [
    "<bos>", "<unk>", "the", "pass", "key", "is", ".", "remember", "it", "what", "?",
    "grass", "green", "sky", "blue", "sun", "yellow", "here", "we", "go", "there", "and", "back", "again",
]
LANDMARK_FILLER = "the grass is green . the sky is blue . the sun is yellow . here we go . there and back again ."


class Vocab:
    """Digits, template words, then opaque filler words ``w<i>`` up to ``size``."""

    def __init__(self, size: int = 512):
        base = DIGITS + SPECIALS
        if size < len(base) + 8:
            raise InvalidConfig(f"vocab size must be >= {len(base) + 8}")
        self.size = size
        self.words = base + [f"w{i}" for i in range(len(base), size)]
        self.index = {w: i for i, w in enumerate(self.words)}
        self.filler_start = len(base)
        self.unk = self.index["<unk>"]

    def encode(self, text) -> list:
        words = text.split() if isinstance(text, str) else text
        return [self.index.get(w, self.unk) for w in words]

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)

    @property
    def digit_ids(self):
        return np.arange(10)

    def __len__(self):
        return self.size


@dataclass(frozen=True)
class PasskeySpec:
    length: int = 256
    key_len: int = 5
    position: Optional[float] = None
    filler: str = "landmark"

    def __post_init__(self):
        if self.key_len < 0:
            raise InvalidConfig("key_len must be >= 0")
        if self.position is not None and not 0.0 <= self.position <= 1.0:
            raise InvalidConfig("position must be a fraction in [0, 1] or None (random)")
        if self.filler not in ("landmark", "zipf", "uniform"):
            raise InvalidConfig("filler must be landmark, zipf or uniform")
        if self.length < self.min_length:
            raise InvalidConfig(f"length {self.length} too short for key_len {self.key_len} (min {self.min_length})")

    @property
    def min_length(self) -> int:
        return 1 + (self.key_len + 8 if self.key_len else 0) + 10 + 2 * self.key_len


@dataclass
class PasskeySample:
    tokens: np.ndarray
    prompt_len: int
    answer: np.ndarray
    key_start: int

    @property
    def answer_span(self):
        return slice(self.prompt_len, self.prompt_len + len(self.answer))


def _filler(vocab: Vocab, kind: str, count: int, rng, offset: int = 0) -> list:
    if count <= 0:
        return []
    if kind == "landmark":
        pattern = vocab.encode(LANDMARK_FILLER)
        return [pattern[(offset + i) % len(pattern)] for i in range(count)]
    n_fill = vocab.size - vocab.filler_start
    if kind == "uniform":
        return list(vocab.filler_start + rng.integers(0, n_fill, count))
    ranks = np.arange(1, n_fill + 1)
    p = 1.0 / ranks
    return list(vocab.filler_start + rng.choice(n_fill, size=count, p=p / p.sum()))


def gen_passkey(spec: PasskeySpec, seed, vocab: Optional[Vocab] = None) -> PasskeySample:
    """One passkey sequence of exactly ``spec.length`` tokens (prompt + answer)."""
    vocab = vocab or Vocab()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = spec.key_len
    digits = rng.integers(0, 10, k)
    question = vocab.encode("what is the pass key ? the pass key is")
    needle = (vocab.encode("the pass key is") + list(digits) + vocab.encode(". remember it .")) if k else []
    n_fill = spec.length - 1 - len(needle) - len(question) - k
    frac = rng.random() if spec.position is None else spec.position
    before = int(round(frac * n_fill))
    head = _filler(vocab, spec.filler, before, rng)
    tail = _filler(vocab, spec.filler, n_fill - before, rng, offset=before)
    prompt = [vocab.index["<bos>"]] + head + needle + tail + question
    tokens = np.array(prompt + list(digits), dtype=np.int64)
    key_start = 1 + before + 4 if k else -1
    return PasskeySample(tokens=tokens, prompt_len=len(prompt), answer=digits.astype(np.int64), key_start=key_start)


# --------------------------------------------------------------------------
# corpora: sample(rng, batch, seq_len) -> inputs, targets, loss weights


class PasskeyCorpus:
    """Passkey sequences of ``seq_len + 1`` tokens; loss on the answer (or everywhere)."""

    def __init__(self, vocab: Vocab, key_len=5, filler="landmark", answer_only=True, position=None):
        self.vocab, self.key_len, self.filler = vocab, key_len, filler
        self.answer_only, self.position = answer_only, position

    def sample(self, rng, batch, seq_len):
        xs, ys, ws = [], [], []
        spec = PasskeySpec(seq_len + 1, self.key_len, self.position, self.filler)
        for _ in range(batch):
            s = gen_passkey(spec, rng, self.vocab)
            w = np.zeros(seq_len)
            if self.answer_only:
                w[s.prompt_len - 1: s.prompt_len - 1 + len(s.answer)] = 1
            else:
                w[:] = 1
            xs.append(s.tokens[:-1])
            ys.append(s.tokens[1:])
            ws.append(w)
        return np.stack(xs), np.stack(ys), np.stack(ws)


class CopyCorpus:
    """Random segments (filler words and digits) repeated to fill the row.

    The period is drawn per row from ``[min_period, seq_len // 2]`` so copying
    must be done by content, not by a fixed offset. Loss covers every
    token after the first period.
    """

    def __init__(self, vocab: Vocab, min_period: int = 8):
        self.vocab, self.min_period = vocab, min_period

    def sample(self, rng, batch, seq_len):
        xs, ys, ws = [], [], []
        pool = np.concatenate([np.arange(10), np.arange(self.vocab.filler_start, self.vocab.size)])
        for _ in range(batch):
            hi = max(self.min_period, (seq_len + 1) // 2)
            period = int(rng.integers(self.min_period, hi + 1))
            seg = rng.choice(pool, size=period)
            row = np.resize(seg, seq_len + 1)
            w = np.zeros(seq_len)
            w[period - 1:] = 1
            xs.append(row[:-1])
            ys.append(row[1:])
            ws.append(w)
        return np.stack(xs), np.stack(ys), np.stack(ws)


class StreamCorpus:
    """Random windows of a fixed token stream."""

    def __init__(self, stream):
        self.stream = np.asarray(stream, dtype=np.int64)
        if self.stream.size < 2:
            raise InvalidInput("corpus must hold at least two tokens")

    def sample(self, rng, batch, seq_len):
        n = self.stream.size
        if n < seq_len + 1:
            reps = -(-(seq_len + 1) // n)
            stream = np.tile(self.stream, reps)
        else:
            stream = self.stream
        starts = rng.integers(0, stream.size - seq_len, batch)
        x = np.stack([stream[s:s + seq_len] for s in starts])
        y = np.stack([stream[s + 1:s + seq_len + 1] for s in starts])
        return x, y, np.ones(x.shape)


class RepeatCorpus(StreamCorpus):
    """A fixed pattern repeated end to end (memorisation sanity check)."""

    def __init__(self, pattern, repeats=64):
        super().__init__(np.tile(np.asarray(pattern, dtype=np.int64), repeats))


def zipf_ngram_stream(vocab: Vocab, length: int, seed=0, order: int = 1, alpha: float = 1.1,
                      branching: int = 32, table_seed: int = 0):
    """Markov text over the filler words.

    Each context of ``order`` previous tokens (hashed onto one of ``vocab.size``
    rows) has its own Zipfian next-token law over ``branching`` candidates.
    The transition table depends only on ``table_seed``, so streams drawn with
    different ``seed`` values share one distribution (train / held-out).
    """
    lo, V = vocab.filler_start, vocab.size
    n_fill = V - lo
    branching = min(branching, n_fill)
    trng = np.random.default_rng(table_seed)
    table = lo + np.stack([trng.choice(n_fill, size=branching, replace=False) for _ in range(V)])
    p = 1.0 / np.arange(1, branching + 1) ** alpha
    cdf = np.cumsum(p / p.sum())
    rng = np.random.default_rng(seed)
    picks = np.minimum(np.searchsorted(cdf, rng.random(length)), branching - 1)
    out = np.empty(length, dtype=np.int64)
    out[:order] = lo + rng.integers(0, n_fill, order)[:length]
    mult = 1000003 ** np.arange(order)
    for t in range(order, length):
        row = int(np.dot(out[t - order:t], mult) % V)
        out[t] = table[row, picks[t]]
    return out


class ZipfCorpus(StreamCorpus):
    def __init__(self, vocab: Vocab, length: int = 200_000, seed: int = 0, order: int = 1, table_seed: int = 0):
        super().__init__(zipf_ngram_stream(vocab, length, seed, order, table_seed=table_seed))


class MixtureCorpus:
    """Each row comes from component ``i`` with probability ``weights[i]``."""

    def __init__(self, components: Sequence, weights: Sequence[float]):
        if len(components) != len(weights) or not components:
            raise InvalidConfig("mixture needs matching components and weights")
        w = np.asarray(weights, dtype=float)
        self.components, self.p = list(components), w / w.sum()

    def sample(self, rng, batch, seq_len):
        which = rng.choice(len(self.components), size=batch, p=self.p)
        rows = [self.components[i].sample(rng, 1, seq_len) for i in which]
        return tuple(np.concatenate([r[j] for r in rows]) for j in range(3))


def load_text(path, vocab: Vocab) -> np.ndarray:
    """Whitespace-tokenise a UTF-8 file; unknown words hash into the filler range."""
    words = Path(path).read_text(encoding="utf-8").split()
    if not words:
        raise InvalidInput(f"{path} holds no text")
    lo, n_fill = vocab.filler_start, vocab.size - vocab.filler_start
    ids = []
    for w in words:
        i = vocab.index.get(w.lower())
        if i is None:
            i = lo + (int.from_bytes(w.encode("utf-8")[:8].ljust(8, b"\0"), "little") * 2654435761) % n_fill
        ids.append(i)
    return np.array(ids, dtype=np.int64)
