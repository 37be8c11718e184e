import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybrid_attn.gdn import (gdn_chunkwise_backward, gdn_chunkwise_forward, gdn_recurrent,
                             gdn_recurrent_step, unit_lower_inverse)
from hybrid_attn.numerics import ShapeError, l2_normalize
from fdcheck import fd_grad, rel_err, worst_rel_err
from oracles import gated_reference


def inputs(rng, L=32, h=2, d=4, dtype=np.float64, B=None):
    lead = (L, h) if B is None else (B, L, h)
    Q = rng.standard_normal(lead + (d,))
    K = l2_normalize(rng.standard_normal(lead + (d,)))
    V = rng.standard_normal(lead + (d,))
    alpha = np.exp(-rng.uniform(0.01, 0.5, lead))
    beta = rng.uniform(0.1, 0.9, lead)
    return tuple(x.astype(dtype) for x in (Q, K, V, alpha, beta))


# ---------------------------------------------------------------- single step

def test_step_examples():
    o, S = gdn_recurrent_step(np.zeros((2, 2)), np.array([1.0, 0]), np.array([1.0, 0]),
                              np.array([5.0, 7.0]), 1.0, 1.0)
    np.testing.assert_array_equal(S, [[5, 0], [7, 0]])
    np.testing.assert_array_equal(o, [5, 7])


def test_step_without_write_is_pure_decay(rng):
    S = rng.standard_normal((3, 3))
    k = l2_normalize(rng.standard_normal(3))
    _, S2 = gdn_recurrent_step(S, rng.standard_normal(3), k, rng.standard_normal(3), 0.7, 0.0)
    np.testing.assert_allclose(S2, 0.7 * S, rtol=0, atol=1e-15)


def test_delta_rule_overwrites(rng):
    k = l2_normalize(rng.standard_normal(4), eps=0.0)
    q = rng.standard_normal(4)
    _, S = gdn_recurrent_step(np.zeros((4, 4)), q, k, rng.standard_normal(4), 1.0, 1.0)
    v2 = rng.standard_normal(4)
    _, S = gdn_recurrent_step(S, q, k, v2, 1.0, 1.0)
    np.testing.assert_allclose(S @ k, v2, atol=1e-14)


# ---------------------------------------------------------------- chunkwise vs recurrent

@pytest.mark.parametrize("C,c", [(8, 8), (8, 4), (8, 2), (16, 4)])
@pytest.mark.parametrize("decay_softmax", [True, False])
def test_chunkwise_matches_recurrent(rng, C, c, decay_softmax):
    Q, K, V, a, b = inputs(rng)
    lin = rng.random((2, 32 // C)) < 0.5
    S0 = rng.standard_normal((2, 4, 4))
    O1, S1 = gdn_recurrent(Q, K, V, a, b, lin, C, S0=S0, decay_softmax=decay_softmax)
    O2, S2, _ = gdn_chunkwise_forward(Q, K, V, a, b, lin, C, S0=S0, c=c,
                                      decay_softmax=decay_softmax)
    np.testing.assert_allclose(O2, O1, atol=1e-12)
    np.testing.assert_allclose(S2, S1, atol=1e-12)


def test_batched_matches_per_sequence(rng):
    Q, K, V, a, b = inputs(rng, B=3)
    lin = rng.random((3, 2, 4)) < 0.5
    O, S, _ = gdn_chunkwise_forward(Q, K, V, a, b, lin, 8)
    for i in range(3):
        Oi, Si, _ = gdn_chunkwise_forward(Q[i], K[i], V[i], a[i], b[i], lin[i], 8)
        np.testing.assert_allclose(O[i], Oi, atol=1e-13)
        np.testing.assert_allclose(S[i], Si, atol=1e-13)


def test_all_softmax_without_decay_keeps_state(rng):
    Q, K, V, _, b = inputs(rng)
    a = np.ones((32, 2))
    S0 = rng.standard_normal((2, 4, 4))
    lin = np.zeros((2, 4), dtype=bool)
    O, S, sv = gdn_chunkwise_forward(Q, K, V, a, b, lin, 8, S0=S0)
    np.testing.assert_array_equal(S, S0)
    for t in range(4):
        np.testing.assert_array_equal(sv.commits.reshape(2, 4, 4, 4)[:, t], S0)
    # outputs are the inner-chunk recurrence restarted from S0 in every chunk
    for t in range(4):
        sl = slice(8 * t, 8 * t + 8)
        Ot, _ = gdn_recurrent(Q[sl], K[sl], V[sl], a[sl], b[sl], S0=S0)
        np.testing.assert_allclose(O[sl], Ot, atol=1e-12)


def test_softmax_chunk_state_is_decay_only(rng):
    Q, K, V, a, b = inputs(rng)
    S0 = rng.standard_normal((2, 4, 4))
    lin = np.zeros((2, 4), dtype=bool)
    _, S, _ = gdn_chunkwise_forward(Q, K, V, a, b, lin, 8, S0=S0)
    decay = np.exp(np.log(a).reshape(4, 8, 2).sum(axis=1))        # [chunk, head]
    expect = S0.copy()
    for t in range(4):
        expect = decay[t][:, None, None] * expect
    np.testing.assert_allclose(S, expect, rtol=1e-13)


def test_single_chunk_parallel_form(rng):
    """L == C from a zero state: WY form solved densely, for either routing."""
    Q, K, V, a, b = inputs(rng, L=8, h=1)
    q, k, v, g, bt = Q[:, 0], K[:, 0], V[:, 0], np.log(a[:, 0]), b[:, 0]
    G = np.cumsum(g)
    Gam = np.tril(np.exp(G[:, None] - G[None, :]))
    T = np.eye(8) + np.tril(bt[:, None] * (k @ k.T) * Gam, -1)
    U = np.linalg.solve(T, bt[:, None] * v)
    ref = ((q @ k.T) * Gam) @ U
    for lin in (True, False):
        O, _, _ = gdn_chunkwise_forward(Q, K, V, a, b, np.array([[lin]]), 8)
        np.testing.assert_allclose(O[:, 0], ref, atol=1e-12)


def test_unit_lower_inverse(rng):
    T = np.tril(rng.standard_normal((3, 6, 6)), -1)
    X = unit_lower_inverse(T)
    np.testing.assert_allclose(X @ (np.eye(6) + T), np.broadcast_to(np.eye(6), (3, 6, 6)),
                               atol=1e-12)


def test_shape_checks(rng):
    Q, K, V, a, b = inputs(rng, L=30)
    with pytest.raises(ShapeError):
        gdn_chunkwise_forward(Q, K, V, a, b, None, 8)
    Q, K, V, a, b = inputs(rng)
    with pytest.raises(ShapeError):
        gdn_chunkwise_forward(Q, K, V, a, b, None, 8, c=3)


@given(st.integers(0, 31), st.integers(0, 2 ** 31 - 1))
def test_causality(t, seed):
    r = np.random.default_rng(seed)
    Q, K, V, a, b = inputs(r)
    lin = r.random((2, 4)) < 0.5
    O, _, _ = gdn_chunkwise_forward(Q, K, V, a, b, lin, 8)
    Q2, K2, V2, a2, b2 = (x.copy() for x in (Q, K, V, a, b))
    Q3, K3, V3, a3, b3 = inputs(r)
    for X, Y in ((Q2, Q3), (K2, K3), (V2, V3), (a2, a3), (b2, b3)):
        X[t + 1:] = Y[t + 1:]
    O2, _, _ = gdn_chunkwise_forward(Q2, K2, V2, a2, b2, lin, 8)
    np.testing.assert_array_equal(O2[:t + 1], O[:t + 1])


@given(st.integers(0, 2 ** 31 - 1))
def test_state_norm_bound(seed):
    r = np.random.default_rng(seed)
    Q, K, V, a, b = inputs(r, L=24, h=1)
    S = np.zeros((4, 4))
    bound = 0.0
    for t in range(24):
        _, S = gdn_recurrent_step(S, Q[t, 0], K[t, 0], V[t, 0], a[t, 0], b[t, 0])
        bound += b[t, 0] * np.linalg.norm(V[t, 0])
        assert np.linalg.norm(S, 2) <= bound + 1e-12
    for t in range(5):
        before = np.linalg.norm(S, 2)
        _, S = gdn_recurrent_step(S, Q[t, 0], K[t, 0], V[t, 0], a[t, 0], 0.0)
        assert np.linalg.norm(S, 2) <= before + 1e-15


# ---------------------------------------------------------------- backward

def _loss_setup(rng, inner=True, decay_softmax=True, c=4):
    Q, K, V, a, b = inputs(rng, L=16, h=2, d=4)
    la = np.log(a)
    lin = np.array([[True, False, True, True], [False, True, False, True]])
    S0 = rng.standard_normal((2, 4, 4))
    Wo = rng.standard_normal(Q.shape)
    Ws = rng.standard_normal((2, 4, 4))

    def loss():
        O, S, _ = gdn_chunkwise_forward(Q, K, V, beta=b, log_alpha=la, linear_chunks=lin, C=4,
                                        S0=S0, c=c, inner=inner, decay_softmax=decay_softmax)
        return np.sum(O * Wo) + np.sum(S * Ws)

    _, _, sv = gdn_chunkwise_forward(Q, K, V, beta=b, log_alpha=la, linear_chunks=lin, C=4,
                                     S0=S0, c=c, inner=inner, decay_softmax=decay_softmax)
    grads = gdn_chunkwise_backward(Wo, sv, Ws)
    return loss, grads, dict(Q=Q, K=K, V=V, la=la, b=b, S0=S0), lin


@pytest.mark.parametrize("inner,decay_softmax,c", [(True, True, 4), (True, True, 2),
                                                   (True, False, 4), (False, True, 4),
                                                   (False, False, 2)])
def test_gradients_match_fd(rng, inner, decay_softmax, c):
    loss, g, x, _ = _loss_setup(rng, inner, decay_softmax, c)
    pairs = ((x["Q"], g.dq), (x["K"], g.dk), (x["V"], g.dv), (x["la"], g.dlog_alpha),
             (x["b"], g.dbeta), (x["S0"], g.dS0))
    for X, G in pairs:
        assert worst_rel_err(loss, X, G, rng, k=30) < 1e-4


def test_dalpha_chain_rule(rng):
    loss, g, x, _ = _loss_setup(rng)
    np.testing.assert_allclose(g.dalpha, g.dlog_alpha / np.exp(x["la"]))


def test_zero_cotangent_gives_zero_gradients(rng):
    Q, K, V, a, b = inputs(rng)
    _, _, sv = gdn_chunkwise_forward(Q, K, V, a, b, rng.random((2, 4)) < .5, 8)
    g = gdn_chunkwise_backward(np.zeros_like(Q), sv)
    for arr in (g.dq, g.dk, g.dv, g.dlog_alpha, g.dbeta, g.dS0, g.dscore_la):
        assert not np.any(arr)


def test_score_gradient_matches_continuous_gate(rng):
    Q, K, V, a, b = inputs(rng, L=16, h=2, d=4)
    lin = np.array([[True, False, True, True], [True, True, False, True]])
    S0 = rng.standard_normal((2, 4, 4))
    Wo, Ws = rng.standard_normal(Q.shape), rng.standard_normal((2, 4, 4))
    _, _, sv = gdn_chunkwise_forward(Q, K, V, a, b, lin, 4, S0=S0, c=2)
    g = gdn_chunkwise_backward(Wo, sv, Ws)
    gate = np.ones((2, 4))

    def loss():
        O, S = gated_reference(Q, K, V, a, b, lin, 4, S0, gate)
        return np.sum(O * Wo) + np.sum(S * Ws)

    for hd, j in zip(*np.nonzero(lin)):
        assert rel_err(g.dscore_la[hd, j], fd_grad(loss, gate, (hd, j))) <= 1e-3
    assert not g.dscore_la[~lin].any()
