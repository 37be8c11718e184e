"""Gated DeltaNet linear attention with chunk routing.

State layout is value-major: ``S`` has shape [d_v, d_k] and ``o = S q``.
One step of the gated delta rule::

    S' = alpha * (S - beta * (S k) k^T) + beta * v k^T

Chunk routing (one decision per routing chunk of C tokens and per head):
  * outputs inside a chunk always come from the full recurrence started at
    the committed state entering the chunk (inner-chunk rule);
  * a Linear chunk commits the state the recurrence reaches at chunk end;
  * a Softmax chunk commits only the decayed entering state
    ``prod(alpha) * S`` (or ``S`` unchanged when ``decay_softmax=False``).

The chunkwise form processes sub-chunks of size ``c`` (dividing C) with the
UT transform: within a sub-chunk with cumulative log-decay G and entering
state S0,

    T[r,s] = beta_r exp(G_r - G_s) k_r.k_s            (s < r)
    A^-1   = (I + T)^-1                                (forward substitution)
    U      = A^-1 (beta v) - A^-1 (beta exp(G) k) S0^T
    O      = exp(G) (q S0^T) + ((q k^T) * exp(G_r - G_s))_{s<=r} U
    S_end  = exp(G_c) S0 + U^T (exp(G_c - G) k)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, check_finite


# ---------------------------------------------------------------- recurrent reference

def gdn_recurrent_step(S, q, k, v, alpha, beta):
    """One token of the gated delta rule for a single head. Returns (o, S')."""
    Sk = S @ k
    S_new = alpha * (S - beta * np.outer(Sk, k)) + beta * np.outer(v, k)
    return S_new @ q, S_new


def gdn_recurrent(Q, K, V, alpha, beta, linear_chunks=None, C=None, S0=None,
                  decay_softmax=True):
    """Token-by-token reference with chunk routing.

    Q, K: [L, h, d_k]; V: [L, h, d_v]; alpha, beta: [L, h];
    linear_chunks: [h, L // C] bool (all True when omitted).
    Returns (O [L, h, d_v], committed state [h, d_v, d_k]).
    """
    L, h, dk = Q.shape
    dv = V.shape[-1]
    if linear_chunks is None:
        C = C or L
        linear_chunks = np.ones((h, L // C), dtype=bool)
    S = np.zeros((h, dv, dk), dtype=Q.dtype) if S0 is None else np.array(S0, copy=True)
    O = np.zeros((L, h, dv), dtype=Q.dtype)
    for hd in range(h):
        commit = S[hd].copy()
        work = commit.copy()
        decay = 1.0
        for t in range(L):
            o, work = gdn_recurrent_step(work, Q[t, hd], K[t, hd], V[t, hd],
                                         alpha[t, hd], beta[t, hd])
            O[t, hd] = o
            decay = decay * alpha[t, hd]
            if (t + 1) % C == 0:
                if linear_chunks[hd, t // C]:
                    commit = work
                elif decay_softmax:
                    commit = decay * commit
                work = commit.copy()
                decay = 1.0
        S[hd] = commit
    return O, S


# ---------------------------------------------------------------- chunkwise kernel

def unit_lower_inverse(T):
    """(I + T)^-1 for strictly lower-triangular T[..., c, c], by forward substitution."""
    c = T.shape[-1]
    X = np.zeros_like(T)
    eye = np.eye(c, dtype=T.dtype)
    for r in range(c):
        X[..., r, :] = eye[r] - np.einsum("...s,...sj->...j", T[..., r, :r], X[..., :r, :])
    return X


def _intra(q, k, v, g, b):
    """State-independent sub-chunk quantities, batched over leading axes.

    q, k: [..., c, dk]; v: [..., c, dv]; g (log alpha), b (beta): [..., c].
    """
    c = k.shape[-2]
    incl = np.tril(np.ones((c, c), dtype=bool))
    strict = np.tril(np.ones((c, c), dtype=bool), -1)
    G = np.cumsum(g, axis=-1)
    gam = np.exp(G)
    Gam = np.exp(np.where(incl, G[..., :, None] - G[..., None, :], -np.inf))
    kT = np.swapaxes(k, -1, -2)
    KK = k @ kT
    Ainv = unit_lower_inverse(b[..., :, None] * KK * Gam * strict)
    Ut = Ainv @ (b[..., None] * v)
    W = Ainv @ ((b * gam)[..., None] * k)
    QK = q @ kT
    dec = np.exp(G[..., -1:] - G)
    return dict(q=q, k=k, v=v, b=b, G=G, gam=gam, Gam=Gam, KK=KK, Ainv=Ainv, Ut=Ut, W=W,
                QK=QK, P=QK * Gam, dec=dec, Kd=dec[..., None] * k)


@dataclass
class GDNSaved:
    intra: dict
    S0: np.ndarray        # [N, m, dv, dk] state entering each sub-chunk
    U: np.ndarray         # [N, m, c, dv]
    commits: np.ndarray   # [N, n, dv, dk] committed state entering each routing chunk
    ends: np.ndarray      # [N, n, dv, dk] working state at chunk end (Linear rows only)
    log_decay: np.ndarray  # [N, n]
    g: np.ndarray         # [N, L]
    linear: np.ndarray    # [N, n]
    shape: tuple
    C: int
    c: int
    inner: bool
    decay_softmax: bool
    alpha: np.ndarray


@dataclass
class GDNGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dlog_alpha: np.ndarray
    dbeta: np.ndarray
    dS0: np.ndarray
    dscore_la: np.ndarray
    alpha: np.ndarray = None

    @property
    def dalpha(self):
        return self.dlog_alpha / self.alpha


def _to_nh(x):
    """[B, L, h, ...] -> [B*h, L, ...]."""
    B, L, h = x.shape[:3]
    perm = (0, 2, 1) + tuple(range(3, x.ndim))
    return np.ascontiguousarray(x.transpose(perm)).reshape((B * h, L) + x.shape[3:])


def _from_nh(x, B, h):
    L = x.shape[1]
    y = x.reshape((B, h, L) + x.shape[2:])
    perm = (0, 2, 1) + tuple(range(3, y.ndim))
    return y.transpose(perm)


def _rev_cumsum(x):
    return np.flip(np.cumsum(np.flip(x, -1), axis=-1), -1)


def _count_forward(counter, N, n, n_sub, c, C, dk, dv, inner, n_lin_rows):
    m = n * n_sub
    # K K^T, forward substitution, the two solved right-hand sides, W S0^T
    intra = N * m * (c * c * dk + c * c * (c - 1) // 2 + c * c * (dv + dk) + c * dk * dv)
    if inner:
        intra += N * m * (c * c * dk + c * dk * dv + c * c * dv)
    else:
        intra += N * n * C * dk * dv
    # state folds inside a chunk, except the last one which depends on routing
    intra += N * n * (n_sub - 1) * (c * dk * dv + dk * dv)
    counter.add("linear_inner", intra)
    routed = n_lin_rows * (c * dk * dv + dk * dv) + (N * n - n_lin_rows) * dk * dv
    counter.add("linear_fold", routed)


def gdn_chunkwise_forward(Q, K, V, alpha=None, beta=None, linear_chunks=None, C=16,
                          S0=None, c=None, log_alpha=None, inner=True, decay_softmax=True,
                          counter=None):
    """Chunkwise-parallel gated delta rule under chunk routing.

    Q, K: [L, h, d_k] or [B, L, h, d_k] (K expected L2-normalized); V likewise
    with d_v; alpha (or log_alpha), beta: [B?, L, h]; linear_chunks:
    [B?, h, L // C] bool, True = Linear-routed; S0: [B?, h, d_v, d_k].
    ``inner=False`` replaces inner-chunk outputs by the decayed committed
    state read-out (ablation).
    Returns (O [B?, L, h, d_v], S_final [B?, h, d_v, d_k], saved).
    """
    squeeze = Q.ndim == 3
    if squeeze:
        Q, K, V = Q[None], K[None], V[None]
        alpha = None if alpha is None else np.asarray(alpha)[None]
        log_alpha = None if log_alpha is None else np.asarray(log_alpha)[None]
        beta = np.asarray(beta)[None]
        if linear_chunks is not None:
            linear_chunks = np.asarray(linear_chunks)[None]
        if S0 is not None:
            S0 = np.asarray(S0)[None]
    B, L, h, dk = Q.shape
    dv = V.shape[-1]
    c = c or C
    if L % C:
        raise ShapeError(f"L={L} is not a multiple of C={C}")
    if C % c:
        raise ShapeError(f"sub-chunk size {c} must divide routing chunk size {C}")
    n, n_sub = L // C, C // c
    m = n * n_sub
    dt = Q.dtype
    if log_alpha is None:
        if alpha is None:
            raise ValueError("need alpha or log_alpha")
        alpha = np.asarray(alpha, dtype=dt)
        log_alpha = np.log(alpha)
    else:
        log_alpha = np.asarray(log_alpha, dtype=dt)
        alpha = np.exp(log_alpha)
    if linear_chunks is None:
        linear_chunks = np.ones((B, h, n), dtype=bool)
    linear_chunks = np.broadcast_to(np.asarray(linear_chunks, dtype=bool), (B, h, n))
    if S0 is None:
        S0 = np.zeros((B, h, dv, dk), dtype=dt)

    N = B * h
    q = _to_nh(Q).reshape(N, m, c, dk)
    k = _to_nh(K).reshape(N, m, c, dk)
    v = _to_nh(V).reshape(N, m, c, dv)
    g = _to_nh(log_alpha[..., None])[..., 0]
    bt = _to_nh(np.asarray(beta, dtype=dt)[..., None])[..., 0].reshape(N, m, c)
    lin = linear_chunks.reshape(N, n)
    ia = _intra(q, k, v, g.reshape(N, m, c), bt)
    gam_last = ia["gam"][..., -1]
    Ut, W, Kd = ia["Ut"], ia["W"], ia["Kd"]

    S0_all = np.empty((N, m, dv, dk), dtype=dt)
    U_all = np.empty((N, m, c, dv), dtype=dt)
    commits = np.empty((N, n, dv, dk), dtype=dt)
    ends = np.zeros((N, n, dv, dk), dtype=dt)
    log_decay = g.reshape(N, n, C).sum(axis=-1)
    S_commit = np.asarray(S0, dtype=dt).reshape(N, dv, dk)
    for t in range(n):
        commits[:, t] = S_commit
        S_work = S_commit
        rows = lin[:, t]
        for u in range(n_sub):
            j = t * n_sub + u
            S0_all[:, j] = S_work
            U = Ut[:, j] - W[:, j] @ S_work.transpose(0, 2, 1)
            U_all[:, j] = U
            if u < n_sub - 1:
                S_work = gam_last[:, j, None, None] * S_work + U.transpose(0, 2, 1) @ Kd[:, j]
            elif rows.all():
                ends[:, t] = gam_last[:, j, None, None] * S_work + U.transpose(0, 2, 1) @ Kd[:, j]
            elif rows.any():
                # the final fold is only needed where the chunk routes Linear
                r = np.flatnonzero(rows)
                ends[r, t] = (gam_last[r, j, None, None] * S_work[r]
                              + U[r].transpose(0, 2, 1) @ Kd[r, j])
        if decay_softmax:
            S_dec = np.exp(log_decay[:, t])[:, None, None] * S_commit
        else:
            S_dec = S_commit
        S_commit = np.where(rows[:, None, None], ends[:, t], S_dec)

    if inner:
        o = ia["gam"][..., None] * (q @ S0_all.transpose(0, 1, 3, 2)) + ia["P"] @ U_all
        o = o.reshape(N, L, dv)
    else:
        qc = q.reshape(N, n, C, dk)
        rel = np.exp(np.cumsum(g.reshape(N, n, C), axis=-1))
        o = (rel[..., None] * (qc @ commits.transpose(0, 1, 3, 2))).reshape(N, L, dv)
    if counter is not None:
        _count_forward(counter, N, n, n_sub, c, C, dk, dv, inner, int(lin.sum()))

    saved = GDNSaved(intra=ia, S0=S0_all, U=U_all, commits=commits, ends=ends,
                     log_decay=log_decay, g=g, linear=lin, shape=(B, L, h, dk, dv), C=C, c=c,
                     inner=inner, decay_softmax=decay_softmax, alpha=alpha)
    O = _from_nh(o, B, h)
    S_final = S_commit.reshape(B, h, dv, dk)
    check_finite(O, "gdn output")
    if squeeze:
        return O[0], S_final[0], saved
    return O, S_final, saved


def gdn_chunkwise_backward(dO, saved: GDNSaved, dS_final=None):
    """Gradients of the chunkwise forward for the routing that was taken.

    dscore_la[b, head, t] = <dS_{t+1}, S_{t+1} - decay(S_t)> for Linear-routed
    chunks (the derivative w.r.t. a continuous gate scaling the chunk's state
    contribution, at gate = 1) and 0 for Softmax-routed chunks.
    """
    B, L, h, dk, dv = saved.shape
    squeeze = dO.ndim == 3
    if squeeze:
        dO = dO[None]
        if dS_final is not None:
            dS_final = dS_final[None]
    N = B * h
    C, c = saved.C, saved.c
    n, n_sub = L // C, C // c
    m = n * n_sub
    ia = saved.intra
    q, k, v, b = ia["q"], ia["k"], ia["v"], ia["b"]
    gam, Gam, KK, QK, Ainv, Ut, W, Kd, dec = (ia[x] for x in
                                              ("gam", "Gam", "KK", "QK", "Ainv", "Ut", "W",
                                               "Kd", "dec"))
    gam_last = gam[..., -1]
    S0_all, U_all = saved.S0, saved.U
    lin = saved.linear
    dt = q.dtype
    do = _to_nh(dO).reshape(N, m, c, dv)
    dg_chunk = np.zeros((N, n, C), dtype=dt)      # gradients entering through chunk-level decay

    if saved.inner:
        preU = ia["P"].transpose(0, 1, 3, 2) @ do
        preS = (gam[..., None] * do).transpose(0, 1, 3, 2) @ q
    else:
        qc = q.reshape(N, n, C, dk)
        doc = do.reshape(N, n, C, dv)
        rel = np.exp(np.cumsum(saved.g.reshape(N, n, C), axis=-1))
        pre_commit = (rel[..., None] * doc).transpose(0, 1, 3, 2) @ qc
        qS = qc @ saved.commits.transpose(0, 1, 3, 2)
        dg_chunk += _rev_cumsum(np.sum(doc * qS, axis=-1) * rel)
        dq_readout = (rel[..., None] * (doc @ saved.commits)).reshape(N, m, c, dk)

    dS_end_all = np.empty((N, m, dv, dk), dtype=dt)
    dU_all = np.empty((N, m, c, dv), dtype=dt)
    dscore = np.zeros((N, n), dtype=dt)
    dS_next = (np.zeros((N, dv, dk), dtype=dt) if dS_final is None
               else np.asarray(dS_final, dtype=dt).reshape(N, dv, dk))
    for t in reversed(range(n)):
        S_commit = saved.commits[:, t]
        rows = lin[:, t]
        is_lin = rows[:, None, None]
        gamma = np.exp(saved.log_decay[:, t])
        S_dec = gamma[:, None, None] * S_commit if saved.decay_softmax else S_commit
        dscore[:, t] = np.where(rows, np.sum(dS_next * (saved.ends[:, t] - S_dec),
                                             axis=(-1, -2)), 0.0)
        dS_work = np.where(is_lin, dS_next, 0.0)
        if saved.decay_softmax:
            dS_commit = np.where(is_lin, 0.0, gamma[:, None, None] * dS_next)
            dgamma = np.where(rows, 0.0, np.sum(dS_next * S_commit, axis=(-1, -2)))
            dg_chunk[:, t] += (dgamma * gamma)[:, None]
        else:
            dS_commit = np.where(is_lin, 0.0, dS_next)
        if not saved.inner:
            dS_commit = dS_commit + pre_commit[:, t]
        for u in reversed(range(n_sub)):
            j = t * n_sub + u
            dS_end_all[:, j] = dS_work
            dU = Kd[:, j] @ dS_work.transpose(0, 2, 1)
            dS0 = gam_last[:, j, None, None] * dS_work
            if saved.inner:
                dU += preU[:, j]
                dS0 += preS[:, j]
            dU_all[:, j] = dU
            dS_work = dS0 - dU.transpose(0, 2, 1) @ W[:, j]
        dS_next = dS_commit + dS_work

    incl = np.tril(np.ones((c, c), dtype=bool))
    strict = np.tril(np.ones((c, c), dtype=bool), -1)
    S0T = S0_all.transpose(0, 1, 3, 2)
    dgam = np.zeros_like(gam)
    dG = np.zeros_like(gam)
    # through S_end = gam_last * S0 + U^T (dec * k)
    dgam[..., -1] += np.sum(dS_end_all * S0_all, axis=(-1, -2))
    dKd = U_all @ dS_end_all
    dk_ = dec[..., None] * dKd
    Ed = np.sum(dKd * k, axis=-1) * dec
    dG -= Ed
    dG[..., -1] += Ed.sum(axis=-1)
    dGam = np.zeros_like(Gam)
    if saved.inner:
        dgam += np.sum(do * (q @ S0T), axis=-1)
        dq = gam[..., None] * (do @ S0_all)
        dP = (do @ U_all.transpose(0, 1, 3, 2)) * incl
        dQK = dP * Gam
        dGam += dP * QK
        dq += dQK @ k
        dk_ += dQK.transpose(0, 1, 3, 2) @ q
    else:
        dq = dq_readout
    # U = Ut - W S0^T
    dW = -(dU_all @ S0_all)
    # Ut = Ainv (b v), W = Ainv (b gam k)
    AinvT = Ainv.transpose(0, 1, 3, 2)
    dR1 = AinvT @ dU_all
    dR2 = AinvT @ dW
    dT = -(dR1 @ Ut.transpose(0, 1, 3, 2) + dR2 @ W.transpose(0, 1, 3, 2)) * strict
    db = np.sum(dR1 * v, axis=-1)
    dv_ = b[..., None] * dR1
    t2 = np.sum(dR2 * k, axis=-1)
    db += gam * t2
    dgam += b * t2
    dk_ += (b * gam)[..., None] * dR2
    # T = b_r * KK * Gam (strict lower)
    db += np.sum(dT * KK * Gam, axis=-1)
    dKK = b[..., :, None] * dT * Gam
    dGam += b[..., :, None] * dT * KK
    dk_ += (dKK + dKK.transpose(0, 1, 3, 2)) @ k
    # Gam[r, s] = exp(G_r - G_s); gam = exp(G); G = cumsum(g)
    E = dGam * Gam
    dG += E.sum(axis=-1) - E.sum(axis=-2) + dgam * gam
    dg = _rev_cumsum(dG).reshape(N, L) + dg_chunk.reshape(N, L)

    Bh = (B, h)
    grads = GDNGrads(
        dq=_from_nh(dq.reshape(N, L, dk), *Bh), dk=_from_nh(dk_.reshape(N, L, dk), *Bh),
        dv=_from_nh(dv_.reshape(N, L, dv), *Bh),
        dlog_alpha=_from_nh(dg[..., None], *Bh)[..., 0],
        dbeta=_from_nh(db.reshape(N, L)[..., None], *Bh)[..., 0],
        dS0=dS_next.reshape(B, h, dv, dk), dscore_la=dscore.reshape(B, h, n),
        alpha=saved.alpha,
    )
    if squeeze:
        for name in ("dq", "dk", "dv", "dlog_alpha", "dbeta", "dS0", "dscore_la", "alpha"):
            setattr(grads, name, getattr(grads, name)[0])
    return grads
