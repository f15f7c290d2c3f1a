import numpy as np
import pytest

from msattn.errors import InvalidConfig, InvalidInput
from msattn.model import ModelConfig, TransformerLM
from msattn.ms_attention import MsConfig
from msattn.positional import PosEncoding, frequencies
from msattn.recursion import (
    RecurrentState,
    ScaleSpec,
    blend_weights,
    compress_chunk,
    forward_recursive,
    history_width,
    recurrent_attend,
)

from oracles import dense_reference


def model_for(dtype="float64", **ms):
    ms = dict(dict(s_q=4, s_k=4, topk=4, merges=1, topn=4), **ms)
    cfg = ModelConfig(layers=2, heads=2, head_dim=8, vocab=32, max_seq=256, ms=MsConfig(**ms),
                      pos=PosEncoding("rope", dim=8), dtype=dtype, init_std=0.2)
    return TransformerLM(cfg, seed=11)


def test_single_chunk_is_bitwise_the_plain_forward(rng):
    model = model_for("float32")
    tokens = rng.integers(0, 32, (2, 40))
    logits, _ = forward_recursive(model, tokens, chunk=64, scales=[ScaleSpec(1, 64)])
    assert np.array_equal(logits, model.forward(tokens))


def test_two_chunks_full_range_blend_equals_dense_attention(rng):
    b, h, n, d = 2, 3, 16, 8
    q, k, v = (rng.standard_normal((b, h, 2 * n, d)) for _ in range(3))
    enc = PosEncoding("rope", dim=d)
    want = dense_reference(q, k, v, theta=frequencies(enc))[:, :, n:]
    pos = np.broadcast_to(np.arange(n, 2 * n), (b, n))
    hist_pos = np.broadcast_to(np.arange(n), (b, n))
    hist = (k[:, :, :n], v[:, :, :n], hist_pos, np.ones(n, dtype=bool))
    got, lse = recurrent_attend(q[:, :, n:], hist, (k[:, :, n:], v[:, :, n:]), enc, pos)
    assert lse.shape == (b, h, n)
    assert np.max(np.abs(got - want)) < 1e-5


def test_two_chunk_model_matches_dense_model(rng):
    model = model_for(topk=64, topn=64)
    tokens = rng.integers(0, 32, (1, 64))
    logits, _ = forward_recursive(model, tokens, chunk=32, scales=[ScaleSpec(1, 32)], use_ms=False)
    assert np.max(np.abs(logits - model.forward(tokens))) < 1e-5


def test_state_size_is_constant(rng):
    model = model_for("float32")
    scales = [ScaleSpec(1, 8), ScaleSpec(4, 32)]
    sizes = []
    for n_chunks in range(1, 11):
        _, states = forward_recursive(model, rng.integers(0, 32, (1, 32 * n_chunks)), 32, scales)
        sizes.append(sum(s.nbytes for s in states))
        assert states[0].chunks_seen == n_chunks
    assert len(set(sizes)) == 1


def test_blend_weights_sum_to_one(rng):
    a, c = rng.normal(0, 50, 1000), rng.normal(0, 50, 1000)
    wp, wc = blend_weights(a, c)
    np.testing.assert_allclose(wp + wc, 1.0, atol=1e-15)
    assert np.all((wp >= 0) & (wp <= 1))
    # equal masses split evenly; exp(2)=e^2 times larger history mass dominates
    assert blend_weights(np.array(3.0), np.array(3.0))[0] == pytest.approx(0.5)
    assert blend_weights(np.array(2.0), np.array(0.0))[0] == pytest.approx(np.e**2 / (1 + np.e**2))


def test_compress_chunk_by_hand():
    x = np.arange(8, dtype=np.float64).reshape(1, 8, 1)
    xp, pos, valid = compress_chunk(x, [ScaleSpec(1, 2), ScaleSpec(4, 8)], positions=np.arange(100, 108))
    np.testing.assert_array_equal(xp[0, :, 0], [6, 7, 1.5, 5.5])
    np.testing.assert_array_equal(pos[0], [106, 107, 101, 105])
    assert valid.all()


def test_compress_short_chunk_masks_unused_slots():
    x = np.ones((1, 3, 2))
    xp, _, valid = compress_chunk(x, [ScaleSpec(2, 8)], chunk=8)
    np.testing.assert_array_equal(valid, [True, True, False, False])
    np.testing.assert_array_equal(xp[0, :, 0], [1, 1, 0, 0])


def test_compress_falls_back_to_raw_chunk_when_too_wide():
    x = np.arange(4.0).reshape(1, 4, 1)
    scales = [ScaleSpec(1, 4), ScaleSpec(1, 4)]
    assert history_width(scales, 4, max_range=6) == 4
    xp, _, valid = compress_chunk(x, scales, max_range=6)
    np.testing.assert_array_equal(xp[0, :, 0], [0, 1, 2, 3])
    assert valid.all()


def test_state_update_rejects_shape_change():
    st = RecurrentState.empty(1, 2, [ScaleSpec(1, 4)], chunk=4)
    assert st.is_empty
    with pytest.raises(InvalidInput):
        st.update(np.ones((2, 4, 2)), [ScaleSpec(1, 4)], np.arange(4))


@pytest.mark.parametrize("ratio,rng_", [(0, 4), (2, 3), (1, 0)])
def test_invalid_scale_specs(ratio, rng_):
    with pytest.raises(InvalidConfig):
        ScaleSpec(ratio, rng_)


def test_compress_input_validation():
    with pytest.raises(InvalidInput):
        compress_chunk(np.ones((4, 2)), [ScaleSpec(1, 4)])
    with pytest.raises(InvalidConfig):
        compress_chunk(np.ones((1, 4, 2)), [])
    with pytest.raises(InvalidInput):
        compress_chunk(np.ones((1, 8, 2)), [ScaleSpec(1, 4)], chunk=4)
