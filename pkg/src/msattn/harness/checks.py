"""Self-checks run by ``msattn oracle-check``; each yields (name, passed, detail)."""
from __future__ import annotations

from typing import Iterator, Tuple

import numpy as np

from ..ms_attention import MsConfig, dense_causal_oracle, merge_indices, ms_attention, select_topk
from ..positional import PosEncoding, frequencies, ntk_base, rope_apply
from ..recursion import ScaleSpec, compress_chunk, recurrent_attend

Check = Tuple[str, bool, str]


def figure_instance():
    """Representatives for nine regions that reproduce the worked routing example.

    Key region ``j`` has representative ``e_j``; each query region's
    representative weights its wanted picks in rank order.
    """
    wanted = {5: [3, 4, 2], 6: [5, 4, 2], 7: [3, 5, 4], 8: [5, 4, 7]}
    d = 9
    k_repr = np.eye(9, d)
    q_repr = np.zeros((9, d))
    for r, picks in wanted.items():
        for rank, j in enumerate(picks):
            q_repr[r, j] = 3.0 - rank
    return q_repr[None, None], k_repr[None, None]


def check_figure_example() -> Check:
    cfg = MsConfig(s_q=1, s_k=1, topk=4, merges=1, topn=4, force_local=True)
    q_repr, k_repr = figure_instance()
    raw = select_topk(q_repr, k_repr, cfg)[0, 0]
    rows = raw[5:9].tolist()
    ok_raw = rows == [[3, 4, 2, 5], [5, 4, 2, 6], [3, 5, 4, 7], [5, 4, 7, 8]]
    pair = raw[[6, 8]][None, None]
    dedup = merge_indices(pair, MsConfig(s_q=1, s_k=1, topk=4, merges=2, topn=6, force_local=False))[0, 0, 0]
    forced = merge_indices(pair, MsConfig(s_q=1, s_k=1, topk=4, merges=2, topn=4, force_local=True))[0, 0, 0]
    ok = ok_raw and dedup.tolist() == [5, 4, 2, 7, 6, 8] and sorted(forced.tolist()) == [4, 5, 6, 8]
    return "figure_example", ok, f"raw={rows} dedup={dedup.tolist()} forced={forced.tolist()}"


def check_exhaustive(seed=0, instances=10, backend=None) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        s = int(rng.choice([4, 8, 16]))
        n = int(rng.integers(s, 129))
        b, h, d = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.choice([8, 16, 32]))
        n_sk = -(-n // s)
        cfg = MsConfig(s_q=s, s_k=s, topk=n_sk, merges=1, topn=n_sk, force_local=True)
        q, k, v = (rng.standard_normal((b, h, n, d)).astype(np.float32) for _ in range(3))
        enc = PosEncoding("rope", dim=d)
        got = ms_attention(q, k, v, cfg, enc, backend=backend)
        want = dense_causal_oracle(q.astype(np.float64), k.astype(np.float64), v.astype(np.float64), enc)
        worst = max(worst, float(np.abs(got - want).max()))
    return "exhaustive_equals_dense", worst < 1e-5, f"max_abs={worst:.2e}"


def check_causality(seed=0, trials=5, backend=None) -> Check:
    rng = np.random.default_rng(seed + 1)
    ok = True
    for _ in range(trials):
        cfg = MsConfig(s_q=4, s_k=4, topk=3, merges=1, topn=3)
        n, d = 64, 8
        q, k, v = (rng.standard_normal((1, 2, n, d)).astype(np.float32) for _ in range(3))
        t = int(rng.integers(1, n))
        base = ms_attention(q, k, v, cfg, backend=backend)
        k2, v2 = k.copy(), v.copy()
        k2[..., t, :] += rng.standard_normal(d).astype(np.float32)
        v2[..., t, :] += rng.standard_normal(d).astype(np.float32)
        pert = ms_attention(q, k2, v2, cfg, backend=backend)
        ok &= bool(np.array_equal(base[..., :t, :], pert[..., :t, :]))
    return "kv_causality", ok, f"trials={trials}"


def check_positional(seed=0) -> Check:
    rng = np.random.default_rng(seed + 2)
    d = 16
    x, y = rng.standard_normal((2, d))
    rope = PosEncoding("rope", dim=d)

    def dot(m, n):
        return float(rope_apply(x[None], np.array([m]), rope)[0] @ rope_apply(y[None], np.array([n]), rope)[0])

    shift = abs(dot(3, 1) - dot(103, 101))
    pi1 = np.array_equal(rope_apply(x[None], np.array([7]), PosEncoding("pi", dim=d)),
                         rope_apply(x[None], np.array([7]), rope))
    ntk1 = ntk_base(PosEncoding("ntk", dim=d)) == rope.base
    crd = PosEncoding("crd_ntk", dim=d, ntk_scale=4.0, modulus=10**9)
    ntk = PosEncoding("ntk", dim=d, ntk_scale=4.0)
    pos = np.arange(50)
    crd_eq = np.array_equal(rope_apply(np.tile(x, (50, 1)), pos, crd), rope_apply(np.tile(x, (50, 1)), pos, ntk))
    dec = bool(np.all(np.diff(frequencies(rope)) < 0))
    ok = shift < 1e-5 and pi1 and ntk1 and crd_eq and dec
    return "positional_identities", ok, f"shift_err={shift:.1e} pi={pi1} ntk={ntk1} crd={crd_eq}"


def check_recursion(seed=0) -> Check:
    rng = np.random.default_rng(seed + 3)
    n, d = 16, 8
    q, k, v = (rng.standard_normal((1, 1, 2 * n, d)) for _ in range(3))
    enc = PosEncoding("rope", dim=d)
    dense = dense_causal_oracle(q, k, v, enc)
    pos = np.arange(n, 2 * n)[None]
    _, hpos, valid = compress_chunk(np.zeros((1, n, 1)), [ScaleSpec(1, n)], np.arange(n)[None])
    hist = (k[..., :n, :], v[..., :n, :], hpos, valid)
    out, _ = recurrent_attend(q[..., n:, :], hist, (k[..., n:, :], v[..., n:, :]), enc, pos)
    err = float(np.abs(out - dense[..., n:, :]).max())
    single, _ = recurrent_attend(q[..., :n, :], None, (k[..., :n, :], v[..., :n, :]), enc, np.arange(n)[None])
    same = np.array_equal(single, dense_causal_oracle(q[..., :n, :], k[..., :n, :], v[..., :n, :], enc))
    return "recursion_blend", err < 1e-5 and same, f"two_chunk_err={err:.1e} single_chunk_bitwise={same}"


def run_all(seed: int = 0, backend=None) -> Iterator[Check]:
    yield check_figure_example()
    yield check_exhaustive(seed, backend=backend)
    yield check_causality(seed, backend=backend)
    yield check_positional(seed)
    yield check_recursion(seed)
