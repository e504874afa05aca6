from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rnnt_aux import diffcore as dc
from rnnt_aux.model import (PARTITIONS, ConfigError, ModelConfig, ParamSet, aux_posterior_grid,
                            ce_frame_posteriors, encode, expected_num_params, init_params, join_grid,
                            joint_logits_np, predict)


def zeros_like_params(params: ParamSet) -> ParamSet:
    return ParamSet({p: {k: np.zeros_like(v) for k, v in g.items()} for p, g in params.arrays.items()})


# -- config ------------------------------------------------------------------------------

def test_default_config_matches_desk_scale():
    c = ModelConfig()
    assert (c.input_dim, c.encoder_layers, c.encoder_hidden, c.pred_hidden, c.joint_hidden) == (16, 4, 64, 64, 128)
    assert c.vocab_size == 9 and c.aux_taps == (2,) and c.ce_taps == (2, 4)
    assert c.aux_mlp_hidden == c.encoder_hidden
    assert c.state_vocab_size == 72


@pytest.mark.parametrize("kw", [
    {"aux_taps": (4,)}, {"aux_taps": (0,)}, {"ce_taps": (5,)}, {"vocab_size": 1},
    {"encoder_hidden": 0}, {"subsample_after": (7,)},
])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_top_layer_allowed_as_ce_tap():
    assert ModelConfig(ce_taps=(4,)).ce_taps == (4,)


# -- encoder -----------------------------------------------------------------------------

def test_two_stage_subsampling_lengths():
    c = ModelConfig(encoder_layers=5, subsample_after=(1, 2), aux_taps=(3,), ce_taps=(3,),
                    encoder_hidden=4, input_dim=3)
    assert c.layer_lengths(20) == [10, 5, 5, 5, 5]
    params = init_params(c, 0)
    enc = encode(np.random.default_rng(0).normal(size=(20, 3)), params.constants(), c)
    assert [h.shape[1] for h in enc.layers] == [10, 5, 5, 5, 5]
    assert [int(n[0]) for n in enc.lengths] == [10, 5, 5, 5, 5]


def test_single_frame_without_subsampling():
    c = ModelConfig(subsample_after=(), input_dim=3, encoder_hidden=4)
    enc = encode(np.ones((1, 3)), init_params(c, 0).constants(), c)
    assert all(h.shape[1] == 1 for h in enc.layers)


def test_empty_input_names_minimum():
    c = ModelConfig(input_dim=3, encoder_hidden=4)
    with pytest.raises(ConfigError, match="minimum T is 1"):
        encode(np.ones((0, 3)), init_params(c, 0).constants(), c)


def test_zero_params_give_constant_activations(tiny_config, tiny_params):
    zero = zeros_like_params(tiny_params)
    x = np.random.default_rng(1).normal(size=(9, tiny_config.input_dim))
    enc = encode(x, zero.constants(), tiny_config)
    for h in enc.layers:
        assert np.all(h.value == 0.0)
    # With only biases the first layer ignores x entirely.
    biased = zero.copy()
    biased["enc_shared"]["enc1.b"] = tiny_params["enc_shared"]["enc1.b"]
    a = encode(x, biased.constants(), tiny_config).layers[0].value
    b = encode(-3 * x, biased.constants(), tiny_config).layers[0].value
    np.testing.assert_array_equal(a, b)


def test_encode_batch_matches_single(tiny_config, tiny_params, tiny_data):
    utts = tiny_data.utterances[:3]
    T = max(u.features.shape[0] for u in utts)
    x = np.zeros((3, T, tiny_config.input_dim))
    for b, u in enumerate(utts):
        x[b, :u.features.shape[0]] = u.features
    batch = encode(x, tiny_params.constants(), tiny_config).top.value
    for b, u in enumerate(utts):
        single = encode(u.features, tiny_params.constants(), tiny_config).top.value[0]
        np.testing.assert_allclose(batch[b, :single.shape[0]], single, atol=1e-13)


# -- prediction network --------------------------------------------------------------------

def test_start_state_is_single_vector(tiny_config, tiny_params):
    h = predict([0], tiny_params.constants(), tiny_config)
    assert h.shape == (1, 1, tiny_config.pred_hidden)


@given(prefix=st.lists(st.integers(1, 4), min_size=1, max_size=5), seed=st.integers(0, 1000))
def test_predict_is_causal(prefix, seed):
    c = ModelConfig(input_dim=3, encoder_hidden=4, pred_hidden=5, joint_hidden=6, vocab_size=5)
    leaves = init_params(c, seed).constants()
    rng = np.random.default_rng(seed)
    y = np.array([0] + prefix)
    k = int(rng.integers(1, len(y)))
    y2 = y.copy()
    y2[k:] = rng.permutation(y2[k:]) % 4 + 1
    a = predict(y, leaves, c).value[0]
    b = predict(y2, leaves, c).value[0]
    np.testing.assert_array_equal(a[:k], b[:k])


def test_predict_rejects_bad_prefixes(tiny_config, tiny_params):
    leaves = tiny_params.constants()
    with pytest.raises(ValueError, match="out of range"):
        predict([0, tiny_config.vocab_size], leaves, tiny_config)
    with pytest.raises(ValueError, match="blank"):
        predict([1, 2], leaves, tiny_config)


# -- joint ---------------------------------------------------------------------------------

def _grid(config, params, x, y):
    leaves = params.constants()
    enc = encode(x, leaves, config)
    h_pred = predict(np.concatenate([[0], y]), leaves, config)
    return enc, h_pred, join_grid(enc.top, h_pred, leaves, config)


def test_joint_grid_normalised_and_pointwise(tiny_config, tiny_params, tiny_data):
    u = tiny_data.utterances[0]
    enc, h_pred, grid = _grid(tiny_config, tiny_params, u.features, u.labels)
    g = grid.value[0]
    assert g.shape == (enc.top.shape[1], len(u.labels) + 1, tiny_config.vocab_size)
    np.testing.assert_allclose(np.exp(g).sum(axis=-1), 1.0, atol=1e-12, rtol=0)
    rng = np.random.default_rng(0)
    for _ in range(5):
        t, k = int(rng.integers(g.shape[0])), int(rng.integers(g.shape[1]))
        z = joint_logits_np(enc.top.value[0, t], h_pred.value[0, k], tiny_params["decoder"])
        ref = z - np.log(np.exp(z - z.max()).sum()) - z.max()
        np.testing.assert_allclose(g[t, k], ref, atol=1e-13)


def test_zero_joint_gives_uniform(tiny_config, tiny_params, tiny_data):
    p = tiny_params.copy()
    for k in ("joint.w_out", "joint.b_out"):
        p["decoder"][k] = np.zeros_like(p["decoder"][k])
    _, _, grid = _grid(tiny_config, p, tiny_data.utterances[0].features, tiny_data.utterances[0].labels)
    np.testing.assert_allclose(grid.value, -np.log(tiny_config.vocab_size), atol=1e-15)


def test_join_grid_shape_mismatch(tiny_config, tiny_params):
    leaves = tiny_params.constants()
    with pytest.raises(dc.ShapeError):
        join_grid(dc.constant(np.ones((2, 3, tiny_config.encoder_hidden))),
                  dc.constant(np.ones((1, 2, tiny_config.pred_hidden))), leaves, tiny_config)


# -- auxiliary branch ----------------------------------------------------------------------

def identity_mlp(params: ParamSet, l: int, H: int) -> ParamSet:
    # relu(h) - relu(-h) = h, so hidden size 2H reproduces h exactly.
    p = params.copy()
    eye = np.eye(H)
    p["aux_heads"][f"aux{l}.w1"] = np.hstack([eye, -eye])
    p["aux_heads"][f"aux{l}.b1"] = np.zeros(2 * H)
    p["aux_heads"][f"aux{l}.w2"] = np.vstack([eye, -eye])
    p["aux_heads"][f"aux{l}.b2"] = np.zeros(H)
    return p


def test_identity_mlp_on_top_activations_reproduces_primary(tiny_data):
    H = 5
    c = ModelConfig(input_dim=6, encoder_layers=3, encoder_hidden=H, pred_hidden=4, joint_hidden=7,
                    vocab_size=5, aux_taps=(2,), ce_taps=(3,), aux_mlp_hidden=2 * H, state_vocab_size=20)
    p = identity_mlp(init_params(c, 2), 2, H)
    u = tiny_data.utterances[1]
    enc, h_pred, grid = _grid(c, p, u.features, u.labels)
    aux = aux_posterior_grid(enc.top, 2, dc.stop_gradient(h_pred), p.constants(), c)
    assert aux.shape == grid.shape
    np.testing.assert_allclose(aux.value, grid.value, atol=1e-12, rtol=0)


def test_aux_grid_gradients_routed(tiny_config, tiny_params, tiny_data):
    u = tiny_data.utterances[0]
    leaves = tiny_params.leaves()
    enc = encode(u.features, leaves, tiny_config)
    h_pred = predict(np.concatenate([[0], u.labels]), leaves, tiny_config)
    aux = aux_posterior_grid(enc.layers[0], 1, dc.stop_gradient(h_pred), leaves, tiny_config)
    w = np.random.default_rng(0).normal(size=aux.shape)
    dc.backward(dc.sum(dc.mul(aux, dc.constant(w))))
    assert all(np.all(n.grad == 0) for n in leaves["decoder"].values())
    assert any(np.any(n.grad != 0) for k, n in leaves["aux_heads"].items() if k.startswith("aux1."))
    assert all(np.all(n.grad == 0) for k, n in leaves["aux_heads"].items() if k.startswith("aux2."))
    assert np.any(leaves["enc_shared"]["enc1.w_ih"].grad != 0)


def test_aux_grid_gate_does_not_change_values(tiny_config, tiny_params, tiny_data):
    u = tiny_data.utterances[0]
    leaves = tiny_params.leaves()
    enc = encode(u.features, leaves, tiny_config)
    h_pred = predict(np.concatenate([[0], u.labels]), leaves, tiny_config)
    closed = aux_posterior_grid(enc.layers[1], 2, dc.stop_gradient(h_pred), leaves, tiny_config)
    opened = aux_posterior_grid(enc.layers[1], 2, h_pred, leaves, tiny_config, {"decoder": leaves["decoder"]})
    assert closed.value.tobytes() == opened.value.tobytes()


def test_aux_grid_rejects_untapped_layer(tiny_config, tiny_params):
    leaves = tiny_params.constants()
    with pytest.raises(ConfigError):
        aux_posterior_grid(dc.constant(np.ones((1, 2, 5))), 3, dc.constant(np.ones((1, 1, 4))), leaves, tiny_config)


# -- CE heads ------------------------------------------------------------------------------

def test_ce_heads(tiny_config, tiny_params, tiny_data):
    leaves = tiny_params.constants()
    enc = encode(tiny_data.utterances[0].features, leaves, tiny_config)
    for l in tiny_config.ce_taps:
        lp = ce_frame_posteriors(enc.layers[l - 1], l, leaves, tiny_config).value[0]
        assert lp.shape == (enc.layers[l - 1].shape[1], tiny_config.state_vocab_size)
        np.testing.assert_allclose(np.exp(lp).sum(axis=-1), 1.0, atol=1e-12)
    zero = zeros_like_params(tiny_params).constants()
    lp = ce_frame_posteriors(enc.layers[1], 2, zero, tiny_config).value
    np.testing.assert_allclose(lp, -np.log(tiny_config.state_vocab_size), atol=1e-15)
    with pytest.raises(ConfigError):
        ce_frame_posteriors(enc.layers[0], 1, leaves, tiny_config)


def test_top_ce_head_is_linear():
    c = ModelConfig()
    p = init_params(c, 0)
    top = {k: v for k, v in p["ce_heads"].items() if k.startswith(f"ce{c.encoder_layers}.")}
    assert sorted(top) == ["ce4.b", "ce4.w"]
    assert sum(v.size for v in top.values()) == c.encoder_hidden * c.state_vocab_size + c.state_vocab_size


# -- parameter audit -----------------------------------------------------------------------

@pytest.mark.parametrize("kw", [{}, {"aux_taps": (1, 3), "ce_taps": (1, 2, 3, 4), "pred_layers": 2},
                                {"aux_taps": (), "ce_taps": ()}, {"aux_mlp_hidden": 17, "subsample_after": ()}])
def test_parameter_count_audit(kw):
    c = ModelConfig(**kw)
    p = init_params(c, 0)
    assert p.num_params() == expected_num_params(c)
    names = [name for _, name, _ in p.items()]
    assert len(names) == len(set(names))
    assert set(p.arrays) == set(PARTITIONS)
    # encoder layers split at the deepest intermediate tap
    shared = {n.split(".")[0] for n in p["enc_shared"]}
    assert shared == {f"enc{l}" for l in range(1, c.shared_depth + 1)}


def test_init_is_seeded_and_bounded():
    c = ModelConfig()
    a, b, d = init_params(c, 3), init_params(c, 3), init_params(c, 4)
    assert a.equal(b) and not a.equal(d)
    w = a["enc_shared"]["enc1.w_ih"]
    assert np.abs(w).max() <= 1 / np.sqrt(c.encoder_hidden)
