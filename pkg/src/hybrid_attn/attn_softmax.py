"""Chunked causal softmax attention under a column-wise routing mask.

Visibility rule for query i, key j (chunks of size C):
  * chunk(j) <  chunk(i): visible iff that key chunk is active for the head's group
  * chunk(j) == chunk(i): visible iff j <= i (the diagonal chunk is always on)
  * chunk(j) >  chunk(i): never visible

Forward streams over key chunks with an online log-sum-exp; inactive key
chunks are skipped per (batch, head) row rather than masked. The backward
recomputes probabilities from the saved log-sum-exp and produces the routing
mask gradient ``dM = P * (dP - rowsum(dO * O))`` in the same pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, check_finite


@dataclass
class ColumnMask:
    """``chunk_active[b, g, t]``: key chunk t visible to later chunks for group g."""

    chunk_active: np.ndarray
    C: int

    def __post_init__(self):
        a = np.asarray(self.chunk_active, dtype=bool)
        if a.ndim == 2:
            a = a[None]
        if a.ndim != 3:
            raise ShapeError(f"chunk_active must be [B, groups, chunks], got {a.shape}")
        self.chunk_active = a

    @property
    def n_chunks(self):
        return self.chunk_active.shape[-1]

    def dense(self, group_of_head):
        """Materialized [B, H, L, L] 0/1 mask (for oracles and tests only)."""
        C, n = self.C, self.n_chunks
        L = C * n
        chunk = np.arange(L) // C
        ci, cj = chunk[:, None], chunk[None, :]
        same = (ci == cj) & (np.arange(L)[:, None] >= np.arange(L)[None, :])
        act = self.chunk_active[:, np.asarray(group_of_head), :]  # B,H,n
        earlier = (cj < ci)[None, None] & act[:, :, None, chunk]
        return (same[None, None] | earlier).astype(np.float64)


# ---------------------------------------------------------------- rope

def _rope_angles(positions, d, theta_base):
    k = np.arange(d // 2)
    inv = theta_base ** (-2.0 * k / d)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]


def rope_apply(x, positions, theta_base=10000.0, inverse=False):
    """Rotate consecutive pairs (x[2k], x[2k+1]) by pos * theta_base^(-2k/d).

    x: [..., L, h, d]. ``inverse=True`` applies the transpose rotation (the
    backward map, since rotations are orthogonal).
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rope needs an even head dim, got {d}")
    ang = _rope_angles(positions, d, theta_base)
    cos = np.cos(ang)[:, None, :].astype(x.dtype)
    sin = np.sin(ang)[:, None, :].astype(x.dtype)
    if inverse:
        sin = -sin
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_backward(dy, positions, theta_base=10000.0):
    return rope_apply(dy, positions, theta_base, inverse=True)


# ---------------------------------------------------------------- kernel

@dataclass
class AttnSaved:
    q: np.ndarray      # [N, L, d] with N = B * H
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray
    lse: np.ndarray    # [N, L]; -inf for rows with nothing visible
    active: np.ndarray  # [N, n] bool
    shape: tuple       # original (B, L, H, d)
    C: int
    inner: bool
    group_of_head: np.ndarray
    n_groups: int


def _flatten_heads(x):
    B, L, H, d = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(B * H, L, d)


def _unflatten_heads(x, B, H):
    N, L, d = x.shape
    return x.reshape(B, H, L, d).transpose(0, 2, 1, 3)


def _promote(x):
    return (x[None], True) if x.ndim == 3 else (x, False)


def _rows_for(active_col):
    """Row selector for a key chunk: a slice when every row is active, indices otherwise."""
    if active_col.all():
        return slice(None)
    idx = np.flatnonzero(active_col)
    return idx if idx.size else None


def masked_attention_forward(Q, K, V, mask: ColumnMask, group_of_head, inner=True,
                             counter=None):
    """Causal softmax attention over the columns ``mask`` leaves visible.

    Q, K, V: [L, H, d] or [B, L, H, d]. Scaling 1/sqrt(d) is applied here.
    ``inner=False`` drops the diagonal chunk (ablation); rows with nothing
    visible then output zeros.
    The schedule is key-chunk outer: the diagonal blocks are done in one
    batch, then each key chunk j updates the running log-sum-exp of every
    later query, only for the (batch, head) rows where chunk j is active.
    Returns (O, saved).
    """
    Q, squeeze = _promote(Q)
    K, _ = _promote(K)
    V, _ = _promote(V)
    B, L, H, d = Q.shape
    C = mask.C
    n = mask.n_chunks
    if n * C != L:
        raise ShapeError(f"mask covers {n}x{C} positions but L={L}")
    group_of_head = np.asarray(group_of_head)
    if group_of_head.shape != (H,):
        raise ShapeError("group_of_head must have one entry per head")
    act = mask.chunk_active
    if act.shape[0] == 1 and B > 1:
        act = np.broadcast_to(act, (B,) + act.shape[1:])
    active = act[:, group_of_head, :].reshape(B * H, n)

    q, k, v = _flatten_heads(Q), _flatten_heads(K), _flatten_heads(V)
    N = B * H
    scale = 1.0 / math.sqrt(d)
    dt = Q.dtype
    causal = np.tril(np.ones((C, C), dtype=bool))

    if inner:
        qb, kb, vb = (x.reshape(N, n, C, d) for x in (q, k, v))
        s = np.where(causal, (qb @ kb.transpose(0, 1, 3, 2)) * scale, -np.inf)
        m_run = s.max(axis=-1)
        p = np.exp(s - m_run[..., None])
        l_run = p.sum(axis=-1).reshape(N, L)
        acc = (p @ vb).reshape(N, L, d)
        m_run = m_run.reshape(N, L)
        if counter is not None:
            counter.add("softmax_inner", 2 * N * n * C * C * d)
    else:
        m_run = np.full((N, L), -np.inf, dtype=dt)
        l_run = np.zeros((N, L), dtype=dt)
        acc = np.zeros((N, L, d), dtype=dt)

    for j in range(n - 1):
        rows = _rows_for(active[:, j])
        if rows is None:
            continue
        ks = slice(j * C, (j + 1) * C)
        later = slice((j + 1) * C, L)
        qr = q[rows, later]
        s = (qr @ k[rows, ks].transpose(0, 2, 1)) * scale
        m_old = m_run[rows, later]
        m_new = np.maximum(m_old, s.max(axis=-1))
        p = np.exp(s - m_new[..., None])
        corr = np.exp(m_old - m_new)          # exp(-inf) = 0 for rows seen for the first time
        l_run[rows, later] = corr * l_run[rows, later] + p.sum(axis=-1)
        acc[rows, later] = corr[..., None] * acc[rows, later] + p @ v[rows, ks]
        m_run[rows, later] = m_new
        if counter is not None:
            counter.add("softmax_cross", 2 * qr.shape[0] * qr.shape[1] * C * d)

    seen = l_run > 0
    l_safe = np.where(seen, l_run, 1.0)
    o = np.where(seen[..., None], acc / l_safe[..., None], 0.0).astype(dt, copy=False)
    lse = np.where(seen, m_run + np.log(l_safe), -np.inf).astype(dt, copy=False)

    O = _unflatten_heads(o, B, H)
    check_finite(O, "softmax attention output")
    saved = AttnSaved(q=q, k=k, v=v, o=o, lse=lse, active=active, shape=(B, L, H, d), C=C,
                      inner=inner, group_of_head=group_of_head, n_groups=act.shape[1])
    return (O[0] if squeeze else O), saved


def masked_attention_backward(dO, saved: AttnSaved):
    """Returns (dQ, dK, dV, dscore_nla[B, groups, chunks]).

    dscore_nla[b, g, t] sums dM over every (row, column) pair whose column
    lies in key chunk t and whose row lies in a later chunk, across the heads
    of group g. Inactive chunks and the diagonal chunk contribute nothing.
    """
    squeeze = dO.ndim == 3
    if squeeze:
        dO = dO[None]
    B, L, H, d = saved.shape
    if dO.shape != saved.shape:
        raise ShapeError(f"dO shape {dO.shape} does not match saved forward {saved.shape}")
    C = saved.C
    n = L // C
    q, k, v, o, lse, active = saved.q, saved.k, saved.v, saved.o, saved.lse, saved.active
    N = B * H
    scale = 1.0 / math.sqrt(d)
    do = _flatten_heads(dO)
    D = np.sum(do * o, axis=-1)
    # rows with nothing visible: exp(s - inf) == 0
    lse_safe = np.where(np.isfinite(lse), lse, np.inf)
    causal = np.tril(np.ones((C, C), dtype=bool))
    dsc = np.zeros((N, n), dtype=q.dtype)

    if saved.inner:
        qb, kb, vb, dob = (x.reshape(N, n, C, d) for x in (q, k, v, do))
        s = (qb @ kb.transpose(0, 1, 3, 2)) * scale
        p = np.where(causal, np.exp(s - lse_safe.reshape(N, n, C)[..., None]), 0.0)
        dp = dob @ vb.transpose(0, 1, 3, 2)
        ds = p * (dp - D.reshape(N, n, C)[..., None])
        dv = (p.transpose(0, 1, 3, 2) @ dob).reshape(N, L, d)
        dq = ((ds @ kb) * scale).reshape(N, L, d)
        dk = ((ds.transpose(0, 1, 3, 2) @ qb) * scale).reshape(N, L, d)
    else:
        dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)

    for j in range(n - 1):
        rows = _rows_for(active[:, j])
        if rows is None:
            continue
        ks = slice(j * C, (j + 1) * C)
        later = slice((j + 1) * C, L)
        qr, kr, vr, dor = q[rows, later], k[rows, ks], v[rows, ks], do[rows, later]
        s = (qr @ kr.transpose(0, 2, 1)) * scale
        p = np.exp(s - lse_safe[rows, later][..., None])
        dp = dor @ vr.transpose(0, 2, 1)
        ds = p * (dp - D[rows, later][..., None])
        dsc[rows, j] = ds.sum(axis=(-1, -2))
        dv[rows, ks] += p.transpose(0, 2, 1) @ dor
        dq[rows, later] += (ds @ kr) * scale
        dk[rows, ks] += (ds.transpose(0, 2, 1) @ qr) * scale

    dQ = _unflatten_heads(dq, B, H)
    dK = _unflatten_heads(dk, B, H)
    dV = _unflatten_heads(dv, B, H)
    per_head = dsc.reshape(B, H, n)
    dscore = np.zeros((B, saved.n_groups, n), dtype=q.dtype)
    np.add.at(dscore, (slice(None), saved.group_of_head), per_head)
    if squeeze:
        return dQ[0], dK[0], dV[0], dscore[0]
    return dQ, dK, dV, dscore


def mask_gradient(dO, saved: AttnSaved):
    """Dense per-entry gradient of the loss w.r.t. a multiplicative column mask.

    Returns dM [B, H, L, L]: for each visible (i, j), P_ij * (dO_i . v_j - dO_i . o_i);
    zero where the mask hides the pair. Summing over rows of later chunks and
    the columns of key chunk t (and over a group's heads) gives ``dscore``.
    Quadratic in L; meant for inspection and checks, not for training.
    """
    squeeze = dO.ndim == 3
    if squeeze:
        dO = dO[None]
    B, L, H, d = saved.shape
    C = saved.C
    do = _flatten_heads(dO)
    q, k, v, o = saved.q, saved.k, saved.v, saved.o
    s = (q @ k.transpose(0, 2, 1)) / math.sqrt(d)
    ch = np.arange(L) // C
    act = np.repeat(saved.active, C, axis=1)                  # [N, L] column active
    vis = (ch[None, :, None] > ch[None, None, :]) & act[:, None, :]
    if saved.inner:
        vis = vis | ((ch[:, None] == ch[None, :]) & (np.arange(L)[:, None] >= np.arange(L)))
    lse = np.where(np.isfinite(saved.lse), saved.lse, np.inf)
    p = np.where(vis, np.exp(s - lse[..., None]), 0.0)
    D = np.sum(do * o, axis=-1)
    dM = p * (do @ v.transpose(0, 2, 1) - D[..., None])
    dM = dM.reshape(B, H, L, L)
    return dM[0] if squeeze else dM
