import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from msattn.errors import InvalidConfig, InvalidInput
from msattn.ms_attention import (
    FlopCounter,
    MsConfig,
    admissible_mask,
    backward,
    dense_causal_oracle,
    dense_flop_account,
    flop_account,
    merge_indices,
    ms_attention,
    partition_and_compress,
    perm_score,
    select_topk,
)
from msattn.positional import PosEncoding, frequencies


def qkv(rng, shape, dtype=np.float64):
    return tuple(rng.standard_normal(shape).astype(dtype) for _ in range(3))


# --------------------------------------------------------------------------
# the worked routing example


def worked_instance():
    # key region j -> e_j; query region r weights its picks 3, 2, 1 in rank order
    wanted = {5: [3, 4, 2], 6: [5, 4, 2], 7: [3, 5, 4], 8: [5, 4, 7]}
    k_repr = np.eye(9)
    q_repr = np.zeros((9, 9))
    for r, picks in wanted.items():
        q_repr[r, picks] = [3.0, 2.0, 1.0]
    return q_repr[None, None], k_repr[None, None]


def test_worked_example_raw_selection():
    q_repr, k_repr = worked_instance()
    raw = select_topk(q_repr, k_repr, MsConfig(s_q=1, s_k=1, topk=4, topn=4))[0, 0]
    assert raw[5:9].tolist() == [[3, 4, 2, 5], [5, 4, 2, 6], [3, 5, 4, 7], [5, 4, 7, 8]]


def test_worked_example_merge_and_forced_locals():
    pair = np.array([[[[5, 4, 2, 6], [5, 4, 7, 8]]]])
    dedup = merge_indices(pair, MsConfig(s_q=1, s_k=1, topk=4, merges=2, topn=6, force_local=False))
    assert dedup[0, 0, 0].tolist() == [5, 4, 2, 7, 6, 8]
    forced = merge_indices(pair, MsConfig(s_q=1, s_k=1, topk=4, merges=2, topn=4, force_local=True))
    assert forced[0, 0, 0].tolist() == [5, 4, 6, 8]


def test_worked_example_merge_via_order():
    q_repr, k_repr = worked_instance()
    raw = select_topk(q_repr, k_repr, MsConfig(s_q=1, s_k=1, topk=4, topn=4))[:, :, 5:9]
    cfg = MsConfig(s_q=1, s_k=1, topk=4, merges=2, topn=4)
    merged = merge_indices(raw, cfg, np.array([[[0, 2, 1, 3]]]))
    # groups {5, 7} and {6, 8}
    assert merged[0, 0, 1].tolist() == [5, 4, 6, 8]


# --------------------------------------------------------------------------
# selection, merge and permutation against loop oracles


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**31), s=st.sampled_from([(2, 2), (4, 2), (2, 4), (1, 1)]),
       n_sq=st.integers(1, 12), topk=st.integers(2, 6), merges=st.sampled_from([1, 2]),
       force_local=st.booleans(), permute=st.booleans())
def test_select_topk_matches_bruteforce(seed, s, n_sq, topk, merges, force_local, permute):
    s_q, s_k = s
    r = np.random.default_rng(seed)
    n = n_sq * s_q
    n_sk = n // s_k if n % s_k == 0 else None
    if n_sk is None:
        return
    cfg = MsConfig(s_q=s_q, s_k=s_k, topk=topk, merges=merges, topn=topk * merges, force_local=force_local,
                   permute=permute, perm_width=1)
    q_repr = np.round(r.standard_normal((1, 1, n_sq, 3)), 1)  # rounding creates ties
    k_repr = np.round(r.standard_normal((1, 1, n_sk, 3)), 1)
    got = select_topk(q_repr, k_repr, cfg)[0, 0].tolist()
    want = oracles.select(q_repr[0, 0], k_repr[0, 0], s_q, s_k, topk, merges, force_local, permute)
    assert got == want


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**31), merges=st.integers(1, 4), topk=st.integers(1, 6), n_local=st.sampled_from([1, 2]),
       force_local=st.booleans(), data=st.data())
def test_merge_matches_list_oracle(seed, merges, topk, n_local, force_local, data):
    if force_local and topk < n_local:
        return
    lo = merges * n_local if force_local else 1
    topn = data.draw(st.integers(lo, max(lo, topk * merges)))
    r = np.random.default_rng(seed)
    groups = data.draw(st.integers(1, 3))
    raw = r.integers(-1, 9, (1, 1, groups * merges, topk))
    if force_local:
        raw[..., topk - n_local:] = r.integers(0, 9, raw[..., topk - n_local:].shape)
    s_q, s_k = (2 * n_local, 2) if n_local > 1 else (2, 2)
    cfg = MsConfig(s_q=s_q, s_k=s_k, topk=topk, merges=merges, topn=topn, force_local=force_local)
    got = merge_indices(raw, cfg)[0, 0].tolist()
    for g in range(groups):
        rows = raw[0, 0, g * merges:(g + 1) * merges].tolist()
        assert got[g] == oracles.merge(rows, topn, force_local, n_local)


def test_merge_respects_given_order():
    raw = np.array([[[[1, 0], [2, 1], [3, 2], [4, 3]]]])
    cfg = MsConfig(s_q=1, s_k=1, topk=2, merges=2, topn=4, force_local=False)
    merged = merge_indices(raw, cfg, np.array([[[3, 0, 1, 2]]]))
    assert merged[0, 0].tolist() == [[4, 1, 3, 0], [2, 3, 1, -1]]


def test_perm_score_formula_and_inverse(rng):
    raw = rng.integers(-1, 20, (2, 3, 7, 5))
    cfg = MsConfig(s_q=1, s_k=1, topk=5, topn=5, permute=True, perm_base=5.0, perm_width=3)
    rec = perm_score(raw, cfg, n_sk=20)
    for idx in np.ndindex(2, 3):
        want = oracles.perm_scores(raw[idx].tolist(), 5.0, 3, 20)
        np.testing.assert_allclose(rec.scores[idx], want, rtol=1e-15)
        assert rec.forward[idx].tolist() == sorted(range(7), key=lambda i: (want[i], i))
        assert np.array_equal(rec.forward[idx][rec.inverse[idx]], np.arange(7))
        assert np.array_equal(rec.inverse[idx][rec.forward[idx]], np.arange(7))


def test_perm_width_above_topk_is_rejected():
    with pytest.raises(InvalidConfig):
        perm_score(np.zeros((1, 1, 2, 3), dtype=int), MsConfig(topk=3, topn=3, perm_width=4), 4)


def test_admissible_mask_is_strictly_before():
    cfg = MsConfig(s_q=4, s_k=2, topk=4, topn=4)
    m = admissible_mask(3, 6, cfg)
    assert m.tolist() == [[False] * 6, [True, True] + [False] * 4, [True] * 4 + [False] * 2]
    grouped = admissible_mask(4, 4, MsConfig(s_q=2, s_k=2, topk=2, merges=2, topn=4))
    assert grouped.tolist() == [[False] * 4, [False] * 4, [True, True, False, False], [True, True, False, False]]


def test_partition_and_compress_mean_and_semantic(rng):
    x = rng.standard_normal((1, 2, 10, 4))
    for mode in ("mean", "semantic"):
        got = partition_and_compress(x, 4, mode, valid_len=10)
        xp = np.pad(x, ((0, 0), (0, 0), (0, 2), (0, 0)))
        for h in range(2):
            np.testing.assert_allclose(got[0, h], oracles.region_reprs(xp[0, h], 4, 10, mode), atol=1e-12)


def test_partition_excludes_padding(rng):
    x = rng.standard_normal((1, 1, 6, 3))
    got = partition_and_compress(x, 4, "mean", valid_len=5)
    np.testing.assert_allclose(got[0, 0, 1], x[0, 0, 4], atol=1e-15)


# --------------------------------------------------------------------------
# attention outputs


CONFIGS = [
    dict(s_q=4, s_k=4, topk=3, merges=1, topn=3),
    dict(s_q=4, s_k=4, topk=3, merges=2, topn=4),
    dict(s_q=8, s_k=4, topk=4, merges=1, topn=4),
    dict(s_q=2, s_k=4, topk=2, merges=2, topn=3),
    dict(s_q=4, s_k=4, topk=3, merges=2, topn=5, permute=True, perm_width=2),
    dict(s_q=4, s_k=4, topk=3, merges=1, topn=3, repr_mode="semantic"),
    dict(s_q=4, s_k=4, topk=2, merges=2, topn=3, force_local=True),
]


@pytest.mark.parametrize("params", CONFIGS)
def test_ms_attention_matches_loop_reference(params, rng, backend):
    n, d = 45, 8
    q, k, v = qkv(rng, (2, 2, n, d))
    cfg = MsConfig(**params)
    enc = PosEncoding("rope", dim=d)
    got = ms_attention(q, k, v, cfg, enc, backend=backend)
    want = oracles.ms_reference(q, k, v, theta=frequencies(enc), **params)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_exhaustive_selection_equals_dense(rng, backend):
    for n, s, d in [(64, 8, 16), (50, 4, 8), (7, 4, 4)]:
        q, k, v = qkv(rng, (2, 3, n, d), np.float32)
        n_sk = -(-n // s)
        cfg = MsConfig(s_q=s, s_k=s, topk=n_sk, topn=n_sk)
        enc = PosEncoding("ntk", dim=d, ntk_scale=4.0)
        got = ms_attention(q, k, v, cfg, enc, backend=backend)
        want = oracles.dense_reference(q, k, v, theta=frequencies(enc))
        assert np.abs(got - want).max() < 1e-5


def test_merges_one_is_region_routing(rng):
    # independent routing reference: per Q region pick top regions, attend causally
    q, k, v = qkv(rng, (1, 2, 64, 8))
    params = dict(s_q=8, s_k=8, topk=3, merges=1, topn=3)
    got = ms_attention(q, k, v, MsConfig(**params))
    want = oracles.ms_reference(q, k, v, **params)
    assert np.abs(got - want).max() < 1e-6


def test_locals_only_is_windowed_attention(rng, backend):
    q, k, v = qkv(rng, (2, 2, 40, 8))
    got = ms_attention(q, k, v, MsConfig(s_q=8, s_k=8, topk=1, merges=1, topn=1), backend=backend)
    want = oracles.dense_reference(q, k, v, window=8)
    assert np.abs(got - want).max() < 1e-6


def test_positions_argument_shifts_rotation(rng):
    q, k, v = qkv(rng, (1, 1, 16, 8))
    enc = PosEncoding("rope", dim=8)
    cfg = MsConfig(s_q=4, s_k=4, topk=4, topn=4)
    a = ms_attention(q, k, v, cfg, enc, positions=np.arange(16) + 1000)
    np.testing.assert_allclose(a, oracles.dense_reference(q, k, v, frequencies(enc), np.arange(16) + 1000), atol=1e-10)
    # relative encoding: a uniform shift leaves attention unchanged
    np.testing.assert_allclose(a, ms_attention(q, k, v, cfg, enc), atol=1e-9)


@pytest.mark.parametrize("params", [dict(s_q=4, s_k=4, topk=3, merges=1, topn=3),
                                    dict(s_q=4, s_k=2, topk=4, merges=2, topn=6),
                                    dict(s_q=2, s_k=4, topk=2, merges=2, topn=3)])
def test_kv_causality_exact(params, rng, backend):
    cfg = MsConfig(**params)
    n, d = 48, 8
    for _ in range(8):
        q, k, v = qkv(rng, (1, 2, n, d), np.float32)
        t = int(rng.integers(1, n))
        base = ms_attention(q, k, v, cfg, backend=backend)
        k[..., t, :] += 3.0
        v[..., t:, :] = rng.standard_normal(v[..., t:, :].shape)
        pert = ms_attention(q, k, v, cfg, backend=backend)
        assert np.array_equal(base[..., :t, :], pert[..., :t, :])


def test_query_causality_with_unit_query_regions(rng, backend):
    cfg = MsConfig(s_q=1, s_k=4, topk=3, merges=1, topn=3)
    q, k, v = qkv(rng, (1, 2, 32, 8), np.float32)
    for t in [1, 9, 20, 31]:
        base = ms_attention(q, k, v, cfg, backend=backend)
        q2, k2, v2 = q.copy(), k.copy(), v.copy()
        for a in (q2, k2, v2):
            a[..., t, :] = rng.standard_normal(a[..., t, :].shape)
        pert = ms_attention(q2, k2, v2, cfg, backend=backend)
        assert np.array_equal(base[..., :t, :], pert[..., :t, :])


def test_region_zero_without_locals_raises(rng):
    q, k, v = qkv(rng, (1, 1, 8, 4))
    with pytest.raises(InvalidInput):
        ms_attention(q, k, v, MsConfig(s_q=4, s_k=4, topk=1, topn=1, force_local=False))


def test_input_validation(rng):
    q, k, v = qkv(rng, (1, 1, 8, 4))
    bad = q.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(InvalidInput):
        ms_attention(bad, k, v, MsConfig(s_q=4, s_k=4, topk=2, topn=2))
    with pytest.raises(InvalidInput):
        ms_attention(q, k[..., :7, :], v, MsConfig(s_q=4, s_k=4, topk=2, topn=2))


@pytest.mark.parametrize("kwargs", [
    dict(s_q=0), dict(s_q=3, s_k=2), dict(topk=2, topn=5, merges=2), dict(repr_mode="max"),
    dict(permute=True, topk=3, topn=3, perm_width=4), dict(s_q=8, s_k=2, topk=3, topn=4),
    dict(merges=2, topk=2, topn=1), dict(perm_base=1.0),
])
def test_invalid_configs(kwargs):
    with pytest.raises(InvalidConfig):
        MsConfig(**kwargs)


def test_plan_reuse_reproduces_output(rng, backend):
    q, k, v = qkv(rng, (1, 2, 32, 8))
    cfg = MsConfig(s_q=4, s_k=4, topk=3, merges=2, topn=4)
    out, ctx = ms_attention(q, k, v, cfg, backend=backend, return_context=True)
    again = ms_attention(q + 0.0, k, v, cfg, backend=backend, plan=ctx.plan)
    assert np.array_equal(out, again)
    with pytest.raises(InvalidInput):
        ms_attention(q[..., :16, :], k[..., :16, :], v[..., :16, :], cfg, plan=ctx.plan)


# --------------------------------------------------------------------------
# gradients


def test_backward_matches_central_differences(rng, backend):
    n, d = 20, 4
    q, k, v = qkv(rng, (1, 2, n, d))
    cfg = MsConfig(s_q=4, s_k=4, topk=3, merges=2, topn=4)
    enc = PosEncoding("ntk", dim=d, ntk_scale=2.0)
    w = rng.standard_normal((1, 2, n, d))
    out, ctx = ms_attention(q, k, v, cfg, enc, backend=backend, return_context=True)
    dq, dk, dv = backward(ctx, w)

    def f(qq, kk, vv):
        return float(np.sum(w * ms_attention(qq, kk, vv, cfg, enc, backend=backend, plan=ctx.plan)))

    eps = 1e-6
    for which, grad in enumerate((dq, dk, dv)):
        fd = np.zeros_like(grad)
        for idx in np.ndindex(grad.shape):
            args = [q.copy(), k.copy(), v.copy()]
            args[which][idx] += eps
            hi = f(*args)
            args[which][idx] -= 2 * eps
            fd[idx] = (hi - f(*args)) / (2 * eps)
        np.testing.assert_allclose(grad, fd, atol=1e-7, rtol=1e-6)


def test_three_token_key_gradient_matches_hand_jacobian():
    # single query attending three keys: L = w . o, o = softmax(q K^T / sqrt d) V
    d = 2
    q = np.array([0.3, -0.2])
    K = np.array([[0.1, 0.4], [-0.5, 0.2], [0.7, -0.3]])
    V = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    w = np.array([0.6, -1.1])
    s = K @ q / np.sqrt(d)
    p = np.exp(s) / np.exp(s).sum()
    dp = V @ w
    ds = p * (dp - p @ dp)
    dK_hand = np.outer(ds, q) / np.sqrt(d)
    Q = np.zeros((1, 1, 3, d))
    Q[0, 0, 2] = q
    Kf, Vf = K[None, None], V[None, None]
    cfg = MsConfig(s_q=3, s_k=3, topk=1, topn=1)
    _, ctx = ms_attention(Q, Kf, Vf, cfg, return_context=True)
    W = np.zeros((1, 1, 3, d))
    W[0, 0, 2] = w
    # rows 0 and 1 carry zero upstream gradient, so only the last query contributes
    _, dK, _ = backward(ctx, W)
    np.testing.assert_allclose(dK[0, 0], dK_hand, atol=1e-14)


# --------------------------------------------------------------------------
# work accounting


def test_flop_account_closed_form():
    cfg = MsConfig(s_q=16, s_k=16, topk=8, merges=2, topn=12)
    acc = flop_account(1024, cfg, 32, heads=2)
    assert acc["selection_flops"] == 2 * (1024 // 16) ** 2 * 32
    assert acc["attention_flops"] == 2 * 2 * 1024 * 12 * 16 * 32
    assert acc["gathered_kv_elements"] == 2 * (1024 // 32) * 12 * 16 * 32
    assert acc["gathered_kv_bytes"] == 4 * acc["gathered_kv_elements"]
    assert dense_flop_account(1024, 32, 2) == 2 * 2 * 1024 * 1024 * 32


def test_counted_work_equals_prediction(rng, backend):
    cfg = MsConfig(s_q=8, s_k=8, topk=4, merges=2, topn=6)
    for n in (64, 128):
        q, k, v = qkv(rng, (1, 3, n, 8), np.float32)
        c = FlopCounter()
        ms_attention(q, k, v, cfg, backend=backend, counter=c)
        pred = flop_account(n, cfg, 8, heads=3)
        assert c["selection"] == pred["selection_flops"]
        assert c["attention"] == pred["attention_flops"]
        assert c["gathered_kv_elements"] == pred["gathered_kv_elements"]
    d = FlopCounter()
    dense_causal_oracle(q, k, v, counter=d)
    assert d["attention"] == dense_flop_account(128, 8, 3)
