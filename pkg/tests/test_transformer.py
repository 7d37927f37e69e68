import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_config
from simmt import numerics as nx
from simmt.errors import ConfigError, DataError, DimensionError, NumericalError
from simmt.numerics import Tensor
from simmt.simultaneous import waitk_cross_mask
from simmt.transformer import (EOS, ModelConfig, Transformer, encode, multi_head_attention,
                               positional_encoding, scaled_dot_attention)


def full_mask(t, n):
    return np.ones((t, n), dtype=bool)


# --- config ---------------------------------------------------------------

def test_config_defaults_are_base_sized():
    cfg = ModelConfig()
    assert (cfg.num_layers, cfg.model_dim, cfg.ff_dim, cfg.num_heads) == (6, 512, 2048, 8)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("kw", [dict(model_dim=30, num_heads=4), dict(dropout=1.0),
                                dict(num_layers=0), dict(src_vocab_size=0)])
def test_config_rejects_invalid_values(kw):
    with pytest.raises(ConfigError):
        tiny_config(**kw)


# --- attention ------------------------------------------------------------

def test_attention_identical_keys_give_uniform_weights(rng):
    q = Tensor(rng.normal(size=(2, 3)))
    k = Tensor(np.tile(rng.normal(size=(1, 3)), (4, 1)))
    v = Tensor(rng.normal(size=(4, 3)))
    out, w = scaled_dot_attention(q, k, v)
    np.testing.assert_allclose(w.data, 0.25)
    np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (2, 1)))


def test_attention_single_key_and_hand_case(rng):
    v = Tensor(rng.normal(size=(1, 3)))
    out, w = scaled_dot_attention(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(1, 3))), v)
    np.testing.assert_array_equal(w.data, 1.0)
    np.testing.assert_allclose(out.data, np.tile(v.data, (2, 1)))
    _, w = scaled_dot_attention(Tensor([[1.0, 0.0]]), Tensor([[10.0, 0.0], [0.0, 10.0]]),
                                Tensor(np.eye(2)))
    np.testing.assert_allclose(w.data, [[1.0, 0.0]], atol=1e-3)


def test_attention_fully_masked_row_errors():
    with pytest.raises(NumericalError):
        scaled_dot_attention(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 2))),
                             Tensor(np.ones((2, 2))), mask=np.zeros((1, 2), bool))


def identity_params(d):
    return {f"m.w{x}": Tensor(np.eye(d)) for x in "qkvo"}


def test_single_head_identity_projections_reduce_to_plain_attention(rng):
    q, k, v = (Tensor(rng.normal(size=(3, 4))) for _ in range(3))
    out, _ = multi_head_attention(q, k, v, None, identity_params(4), "m", heads=1)
    ref, _ = scaled_dot_attention(q, k, v)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-14)


@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 2, 4]),
       st.integers(0, 10_000))
def test_mha_output_shape_and_permutation_invariance(b, q_len, r_len, heads, seed):
    rng = np.random.default_rng(seed)
    d = 8
    params = {f"m.w{x}": Tensor(rng.normal(size=(d, d)) / 3) for x in "qkvo"}
    q = Tensor(rng.normal(size=(b, q_len, d)))
    kv = rng.normal(size=(b, r_len, d))
    out, w = multi_head_attention(q, Tensor(kv), Tensor(kv), None, params, "m", heads)
    assert out.shape == q.shape and w.shape == (b, heads, q_len, r_len)
    perm = rng.permutation(r_len)
    out_p, _ = multi_head_attention(q, Tensor(kv[:, perm]), Tensor(kv[:, perm]), None, params,
                                    "m", heads)
    np.testing.assert_allclose(out_p.data, out.data, atol=1e-12)


# --- positional encoding --------------------------------------------------

def test_positional_encoding_examples():
    pe = positional_encoding(3, 6)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1])
    assert pe[1, 0] == pytest.approx(math.sin(1.0))
    assert pe[1, 2] == pytest.approx(math.sin(1 / 10000 ** (2 / 6)))
    assert np.abs(positional_encoding(50, 8)).max() <= 1.0
    with pytest.raises(ConfigError):
        positional_encoding(4, 5)


def test_positional_rows_are_distinct_up_to_10000():
    pe = positional_encoding(10_000, 16)
    # distinct rows <=> no duplicate after rounding far below the row spacing
    assert len(np.unique(np.round(pe, 12), axis=0)) == 10_000


# --- encoder --------------------------------------------------------------

def test_encoder_single_token_shape(tiny_model):
    enc = tiny_model.encode([EOS])
    assert enc.states.shape == (1, 1, 16)


def test_encoder_rejects_out_of_vocab(tiny_model):
    with pytest.raises(DataError):
        tiny_model.encode([99, EOS])


def test_bidirectional_encoder_sees_token_order(tiny_model):
    a = tiny_model.encode([5, 6, 7, EOS], unidirectional=False).states.data
    b = tiny_model.encode([6, 5, 7, EOS], unidirectional=False).states.data
    assert not np.allclose(a[0, 0], b[0, 1])
    # the suffix sees the same multiset but different positions
    assert not np.allclose(a[0, 3], b[0, 3])


@given(st.integers(0, 10_000), st.integers(1, 9))
def test_unidirectional_prefix_consistency(seed, n):
    model = Transformer(tiny_config(), seed=seed % 7)
    x = np.r_[np.random.default_rng(seed).integers(4, 12, n), EOS]
    full = model.encode(x).states.data[0]
    for g in range(1, len(x) + 1):
        np.testing.assert_allclose(model.encode(x[:g]).states.data[0], full[:g], atol=1e-9)


def test_padding_does_not_change_encodings(tiny_model):
    x = [5, 6, EOS]
    single = tiny_model.encode(x).states.data[0]
    padded = tiny_model.encode([[5, 6, EOS, 0, 0], [4, 4, 4, 4, EOS]]).states.data[0, :3]
    np.testing.assert_allclose(padded, single, atol=1e-12)


def test_encode_checks_mask_shape(tiny_model):
    with pytest.raises(DimensionError):
        encode(np.array([[4, 5, EOS]]), np.ones((2, 2), bool), tiny_model.config,
               tiny_model.params)


# --- decoder --------------------------------------------------------------

def test_decoder_causality(tiny_model, rng):
    enc = tiny_model.encode([5, 6, 7, EOS])
    y = np.r_[1, rng.integers(4, 14, 4)]
    short = tiny_model.decode(y[:3], enc, full_mask(3, 4)).data
    long = tiny_model.decode(y, enc, full_mask(5, 4)).data
    np.testing.assert_allclose(long[0, :3], short[0], atol=1e-9)


def test_decoder_ignores_masked_source_tokens(tiny_model):
    y = np.array([1, 5, 6])
    mask = waitk_cross_mask(1, 3, 4)
    a = tiny_model.decode(y, tiny_model.encode([5, 6, 7, EOS]), mask).data
    b = tiny_model.decode(y, tiny_model.encode([5, 6, 9, 4]), mask).data
    np.testing.assert_allclose(a[0, :2], b[0, :2], atol=1e-12)
    assert not np.allclose(a[0, 2], b[0, 2])


def test_widening_cross_mask_changes_logits(tiny_model):
    enc = tiny_model.encode([5, 6, 7, 8, EOS])
    narrow = np.zeros((1, 5), bool)
    narrow[0, :2] = True
    a = tiny_model.decode([1], enc, narrow).data
    b = tiny_model.decode([1], enc, full_mask(1, 5)).data
    assert not np.allclose(a, b)


def test_decoder_rejects_empty_cross_row(tiny_model):
    enc = tiny_model.encode([5, EOS])
    with pytest.raises(DimensionError):
        tiny_model.decode([1, 5], enc, np.array([[True, True], [False, False]]))


def test_target_embedding_is_tied_to_output(tiny_model, rng):
    enc = tiny_model.encode([5, EOS])
    before = tiny_model.decode([1], enc, full_mask(1, 2)).data[0, 0]
    # a constant shift would vanish against the zero-mean layer-norm output
    tiny_model.params["tgt_embed"].data[9] += rng.normal(size=16)
    after = tiny_model.decode([1], enc, full_mask(1, 2)).data[0, 0]
    changed = np.nonzero(~np.isclose(before, after, rtol=0, atol=1e-12))[0]
    assert 9 in changed and len(changed) == 1     # only column 9 moves (BOS row untouched)
    after_input = tiny_model.decode([1, 9], enc, full_mask(2, 2)).data
    assert "out.w" not in tiny_model.params
    assert np.isfinite(after_input).all()


def test_untied_output_has_its_own_matrix():
    model = Transformer(tiny_config(share_tgt_output_embeddings=False), 0)
    assert model.params["out.w"].shape == (16, 14)


def test_end_to_end_gradients_match_finite_differences(tiny_mm_model, rng):
    """Every parameter tensor of a 2-layer D=16 multimodal model, sampled coordinates.

    Coordinates whose true gradient sits below what float64 central
    differences can resolve (|g| < 1e-6) are held to an absolute bound.
    """
    from conftest import random_example
    from simmt.data import collate
    from simmt.multimodal import SupervisionConfig
    from simmt.training import TrainConfig, TrainRegime, compute_loss
    model = tiny_mm_model
    batch = collate([random_example(rng, 3, 2, regions=3, annotate=True),
                     random_example(rng, 5, 4, regions=3, annotate=True)])
    cfg = TrainConfig(regime=TrainRegime("waitk", 2), supervision=SupervisionConfig(1, 1, "scratch"))
    model.zero_grad()
    with nx.Tape() as tape:
        tape.backward(compute_loss(model, batch, cfg, None, False)[0])
    h = 1e-5
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        analytic = (np.zeros_like(p.data) if p.grad is None else p.grad).reshape(-1)
        for i in rng.choice(flat.size, size=min(flat.size, 6), replace=False):
            old = flat[i]
            flat[i] = old + h
            with nx.no_grad():
                fp = compute_loss(model, batch, cfg, None, False)[0].item()
            flat[i] = old - h
            with nx.no_grad():
                fm = compute_loss(model, batch, cfg, None, False)[0].item()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            if abs(num) >= 1e-6:
                assert abs(analytic[i] - num) / abs(num) < 1e-4, name
            else:
                assert abs(analytic[i] - num) < 1e-10, name


def test_right_padding_leaves_real_positions_unchanged(tiny_model):
    enc = tiny_model.encode([[5, 6, EOS], [5, 6, EOS]])
    y = np.array([[1, 7, 8, 2, 0], [1, 7, 8, 2, 9]])
    out = tiny_model.decode(y, enc, np.ones((5, 3), bool)).data
    np.testing.assert_array_equal(out[0, :4], out[1, :4])
