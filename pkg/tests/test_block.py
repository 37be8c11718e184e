import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybrid_attn import numerics as nm
from hybrid_attn.block import (ABLATIONS, BlockConfig, block_backward, block_forward,
                               merge_outputs, merge_outputs_backward,
                               with_ablation)
from hybrid_attn.gdn import gdn_recurrent_step
from fdcheck import fd_grad, rel_err, sample_indices, worst_rel_err
from oracles import random_block_params as random_params

SMALL = BlockConfig(d_model=8, h_softmax=4, h_lin=2, d_head=4, chunk=4, sub_chunk=2)


MIXED = np.array([[True, False, True, False], [False, True, True, False]])


# ---------------------------------------------------------------- merge

def test_merge_examples():
    rng = np.random.default_rng(0)
    O_nla = rng.standard_normal((3, 2, 4))              # L=3, H=2, d=4
    O_la = rng.standard_normal((3, 1, 8))               # h_lin=1, G=2
    one = np.ones(4)
    w = np.zeros((3, 1, 2))
    w[..., 0] = 1.0
    out, _ = merge_outputs(O_nla, O_la, w, one, np.ones(8))
    np.testing.assert_array_equal(out, nm.rmsnorm(O_nla, one))

    a = np.array([[[2.0, 0.0]]])
    b = np.array([[[0.0, 2.0]]])
    g = np.full(2, math.sqrt(2))
    out, _ = merge_outputs(a, b, np.full((1, 1, 2), 0.5), g, g, eps=0.0)
    np.testing.assert_allclose(out[0, 0], [1.0, 1.0])


def test_merge_equal_norms_ignore_weights(rng):
    O = rng.standard_normal((5, 1, 4))        # one softmax head per group
    outs = []
    for w0 in (0.0, 0.3, 1.0):
        w = np.broadcast_to(np.array([w0, 1 - w0]), (5, 1, 2))
        outs.append(merge_outputs(O, O, w, np.ones(4), np.ones(4))[0])
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-15)
    np.testing.assert_allclose(outs[0], outs[2], atol=1e-15)


@pytest.mark.parametrize("single", [False, True])
def test_merge_gradients(rng, single):
    O_nla = rng.standard_normal((2, 5, 4, 3))
    O_la = rng.standard_normal((2, 5, 2, 6))
    logits = rng.standard_normal((2, 5, 2, 2))
    w = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    g1, g2 = rng.standard_normal(3), rng.standard_normal(6)
    R = rng.standard_normal((2, 5, 4, 3))
    _, cache = merge_outputs(O_nla, O_la, w, g1, g2, single_norm=single)
    dn, dl, dw, dg1, dg2 = merge_outputs_backward(R, cache)
    f = lambda: np.sum(merge_outputs(O_nla, O_la, w, g1, g2, single_norm=single)[0] * R)
    for X, G in ((O_nla, dn), (O_la, dl), (w, dw), (g1, dg1)):
        assert worst_rel_err(f, X, G, rng) < 1e-6
    if not single:
        assert worst_rel_err(f, g2, dg2, rng) < 1e-6


# ---------------------------------------------------------------- reductions

def test_all_softmax_block_is_plain_attention():
    cfg = BlockConfig(d_model=16, h_softmax=4, h_lin=2, d_head=4, chunk=4,
                      merge_weights="fixed", fixed_weights=(1.0, 0.0), output_gate=False)
    P = random_params(cfg, 1)
    X = np.random.default_rng(2).standard_normal((2, 16, 16))
    Y, r, _ = block_forward(X, P, cfg, routing_override="all_softmax")
    assert not r.linear.any()

    def act(name):
        z = nm.depthwise_causal_conv(X @ P["W" + name], P["conv_" + name])
        return nm.activation("silu", z).reshape(2, 16, 4, 4)

    q = nm.rmsnorm(act("q"), P["gamma_qs"])
    k = nm.rmsnorm(act("k"), P["gamma_ks"])
    v = act("v")
    s = np.einsum("blhd,bmhd->bhlm", q, k) / 2.0
    s = np.where(np.tril(np.ones((16, 16), bool)), s, -np.inf)
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    O = nm.rmsnorm(np.einsum("bhlm,bmhd->blhd", p, v), P["gamma_onla"])
    ref = O.reshape(2, 16, 16) @ P["Wo"]
    assert np.abs(Y - ref).max() <= 1e-5
    np.testing.assert_allclose(Y, ref, atol=1e-12)


def test_all_linear_block_is_plain_gated_deltanet():
    cfg = BlockConfig(d_model=16, h_softmax=4, h_lin=2, d_head=4, chunk=4, sub_chunk=2,
                      merge_weights="fixed", fixed_weights=(0.0, 1.0))
    P = random_params(cfg, 3)
    X = np.random.default_rng(4).standard_normal((16, 16))
    Y, r, _ = block_forward(X, P, cfg, routing_override="all_linear")
    assert r.linear.all()

    def act(name):
        z = nm.depthwise_causal_conv(X @ P["W" + name], P["conv_" + name])
        return nm.activation("silu", z).reshape(16, 2, 8)

    q, k, v = nm.l2_normalize(act("q")), nm.l2_normalize(act("k")), act("v")
    alpha = np.exp(-nm.softplus(X @ P["Wa"] + P["ba"]))
    beta = nm.sigmoid(X @ P["Wb"] + P["bb"])
    O = np.zeros((16, 2, 8))
    for h in range(2):
        S = np.zeros((8, 8))
        for t in range(16):
            O[t, h], S = gdn_recurrent_step(S, q[t, h], k[t, h], v[t, h], alpha[t, h],
                                            beta[t, h])
    gate = nm.sigmoid(X @ P["Wgate"] + P["bgate"])
    ref = (nm.rmsnorm(O, P["gamma_ola"]).reshape(16, 16) * gate) @ P["Wo"]
    assert np.abs(Y - ref).max() <= 1e-4
    np.testing.assert_allclose(Y, ref, atol=1e-12)


def test_layer_kinds_skip_unused_paths():
    for kind, missing in (("linear", "gamma_qs"), ("softmax", "Wa")):
        cfg = replace(SMALL, kind=kind)
        P = random_params(cfg)
        assert missing not in P and "W_score" not in P
        Y, r, _ = block_forward(np.ones((8, 8)), P, cfg)
        assert r.linear.all() == (kind == "linear")


def test_zero_input_gives_zero_output():
    P = random_params(SMALL)
    Y, _, _ = block_forward(np.zeros((2, 16, 8)), P, SMALL)
    np.testing.assert_array_equal(Y, 0.0)


@settings(max_examples=15)
@given(st.integers(0, 15), st.integers(0, 2 ** 31 - 1))
def test_block_causality(t, seed):
    r = np.random.default_rng(seed)
    cfg = replace(SMALL, rope=True)
    P = random_params(cfg, seed % 7)
    X = r.standard_normal((16, 8))
    Y, rt, _ = block_forward(X, P, cfg)
    X2 = X.copy()
    X2[t + 1:] = r.standard_normal(X2[t + 1:].shape)
    Y2, rt2, _ = block_forward(X2, P, cfg)
    # routing of chunks that end at or before t cannot change
    done = (t + 1) // 4
    np.testing.assert_array_equal(rt2.linear[..., :done], rt.linear[..., :done])
    np.testing.assert_array_equal(Y2[:t + 1], Y[:t + 1])


def test_merge_weights_are_convex():
    P = random_params(SMALL)
    _, _, sv = block_forward(np.random.default_rng(0).standard_normal((16, 8)), P, SMALL)
    assert np.all(sv.w >= 0)
    np.testing.assert_allclose(sv.w.sum(-1), 1.0, atol=1e-15)


def test_all_softmax_state_is_decay_only():
    P = random_params(SMALL)
    X = np.random.default_rng(5).standard_normal((1, 16, 8))
    _, _, sv = block_forward(X, P, SMALL, routing_override="all_softmax")
    np.testing.assert_array_equal(sv.lin["S_final"], 0.0)     # decay of a zero state


# ---------------------------------------------------------------- gradients

def _fd_check_block(cfg, override, seed, per_tensor=6):
    P = random_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    X = rng.standard_normal((2, 16, cfg.d_model))
    Y, _, sv = block_forward(X, P, cfg, routing_override=override)
    R = rng.standard_normal(Y.shape)
    dX, grads = block_backward(R, sv, P)
    f = lambda: np.sum(block_forward(X, P, cfg, routing_override=override)[0] * R)
    worst, n = {}, 0
    for name in P.names():
        errs = [rel_err(grads[name][i], fd_grad(f, P[name], i))
                for i in sample_indices(rng, P[name].shape, per_tensor)]
        worst[name] = max(errs)
        n += len(errs)
    worst["X"] = worst_rel_err(f, X, dX, rng, k=per_tensor)
    return worst, n, grads


@pytest.mark.parametrize("variant", ["default", "rope", "score_bias"] + list(ABLATIONS))
def test_block_gradients_match_fd(variant):
    cfg = SMALL
    if variant == "rope":
        cfg = replace(SMALL, rope=True)
    elif variant == "score_bias":
        cfg = replace(SMALL, score_bias=True)
    elif variant in ABLATIONS:
        cfg = with_ablation(SMALL, variant)
    worst, n, grads = _fd_check_block(cfg, MIXED, 0)
    assert n >= 64
    bad = {k: v for k, v in worst.items() if v > 1e-3}
    assert not bad, bad
    assert not grads["W_score"].any()        # override severs the score path


def test_zero_cotangent_block():
    P = random_params(SMALL)
    X = np.random.default_rng(0).standard_normal((16, 8))
    Y, _, sv = block_forward(X, P, SMALL)
    dX, g = block_backward(np.zeros_like(Y), sv, P)
    assert not dX.any() and not any(v.any() for v in g.values())


def test_learned_routing_sends_score_gradient():
    P = random_params(SMALL)
    X = np.random.default_rng(0).standard_normal((2, 16, 8))
    Y, r, sv = block_forward(X, P, SMALL)
    _, g = block_backward(np.random.default_rng(1).standard_normal(Y.shape), sv, P)
    assert r.override is None and np.abs(g["W_score"]).max() > 0


def test_learned_gradients_equal_frozen_plus_score_path():
    """Straight-through: everything except the score path matches the frozen routing."""
    P = random_params(SMALL)
    X = np.random.default_rng(0).standard_normal((2, 16, 8))
    Y, r, sv = block_forward(X, P, SMALL)
    R = np.random.default_rng(1).standard_normal(Y.shape)
    _, g_learned = block_backward(R, sv, P)
    _, _, sv2 = block_forward(X, P, SMALL, routing_override=r.linear)
    _, g_frozen = block_backward(R, sv2, P)
    for name in P.names():
        if name != "W_score":
            np.testing.assert_array_equal(g_learned[name], g_frozen[name])


# ---------------------------------------------------------------- ablations

def test_ablation_flags_change_outputs():
    cfg = replace(SMALL, d_model=16)          # W_w shapes coincide for q and x sources
    X = np.random.default_rng(7).standard_normal((2, 16, 16))
    P = random_params(cfg, 2)
    Y0, _, _ = block_forward(X, P, cfg, routing_override=MIXED)
    for flag in ABLATIONS:
        Y1, _, _ = block_forward(X, P, with_ablation(cfg, flag), routing_override=MIXED)
        assert np.abs(Y1 - Y0).max() > 1e-6, flag


def test_unknown_ablation():
    with pytest.raises(ValueError):
        with_ablation(SMALL, "no_such_flag")


@pytest.mark.parametrize("bad", [dict(h_softmax=3), dict(kind="mamba"), dict(sub_chunk=3),
                                 dict(inner_chunk="none"), dict(merge_weights="fixed",
                                                                fixed_weights=(0.7, 0.7))])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        replace(SMALL, **bad)


def test_shape_errors():
    P = random_params(SMALL)
    with pytest.raises(nm.ShapeError):
        block_forward(np.ones((15, 8)), P, SMALL)
    with pytest.raises(nm.ShapeError):
        block_forward(np.ones((16, 7)), P, SMALL)
