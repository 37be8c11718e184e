"""Chunk scoring and hard routing between the two attention operations.

Scores come from a linear map of each chunk's mean input row. Index 0 of the
last score axis is Softmax, index 1 is Linear; a tie routes to Softmax.
The backward is straight-through: the chosen op's score receives the
routing gradient reported by its attention path, the other op's score gets 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericalError, ShapeError, mean_pool_chunks, mean_pool_chunks_backward

SOFTMAX, LINEAR = 0, 1
OVERRIDES = ("all_softmax", "all_linear")


@dataclass
class ChunkRouting:
    """``linear[b, g, t]`` is True when chunk t of group g is Linear-routed.

    ``scores`` is None for forced routings; ``override`` names the forcing.
    """

    linear: np.ndarray
    scores: np.ndarray | None = None
    override: str | None = None

    @property
    def choice(self):
        return self.linear.astype(np.int8)

    @property
    def softmax_fraction(self):
        return 1.0 - float(self.linear.mean()) if self.linear.size else 0.0


def compute_scores(X, W_score, C, bias=None):
    """X: [B?, L, D] -> (scores [B?, groups, L // C, 2], pooled chunk means)."""
    pooled = mean_pool_chunks(X, C)
    s = pooled @ W_score
    if bias is not None:
        s = s + bias
    s = s.reshape(s.shape[:-1] + (-1, 2))          # [..., n, groups, 2]
    return np.swapaxes(s, -3, -2), pooled


def route(scores):
    if np.isnan(scores).any():
        raise NumericalError("NaN routing score", {"n_nan": int(np.isnan(scores).sum())})
    return ChunkRouting(linear=scores[..., LINEAR] > scores[..., SOFTMAX], scores=scores)


def forced_routing(mode, shape, fraction=None):
    """Routing independent of the input.

    mode: "all_softmax", "all_linear" or "fraction" (a share ``fraction`` of
    each group's chunks routed Softmax, spread evenly and placed symmetrically
    about the sequence centre so the mean Softmax position is the midpoint).
    """
    if mode == "all_softmax":
        lin = np.zeros(shape, dtype=bool)
    elif mode == "all_linear":
        lin = np.ones(shape, dtype=bool)
    elif mode == "fraction":
        if fraction is None or not 0.0 <= fraction <= 1.0:
            raise ValueError(f"fraction must lie in [0, 1], got {fraction!r}")
        n = shape[-1]
        n_soft = int(round(fraction * n))
        lin = np.ones(shape, dtype=bool)
        if n_soft:
            base = np.floor((np.arange(n_soft) + 0.5) * n / n_soft).astype(int)
            # mirror the first half so the placement is symmetric about the centre
            half = n_soft // 2
            idx = base.copy()
            idx[n_soft - half:] = (n - 1 - base[:half])[::-1]
            lin[..., idx] = False
    else:
        raise ValueError(f"unknown routing mode {mode!r}")
    return ChunkRouting(linear=lin, override=mode)


def score_grad(dscore_nla, dscore_la, routing: ChunkRouting):
    """Straight-through cotangent for the raw scores, shape [..., groups, n, 2]."""
    if dscore_nla.shape != routing.linear.shape or dscore_la.shape != routing.linear.shape:
        raise ShapeError(f"dscore shapes {dscore_nla.shape}, {dscore_la.shape} "
                         f"do not match routing {routing.linear.shape}")
    lin = routing.linear
    ds = np.zeros(lin.shape + (2,), dtype=dscore_nla.dtype)
    ds[..., SOFTMAX] = np.where(lin, 0.0, dscore_nla)
    ds[..., LINEAR] = np.where(lin, dscore_la, 0.0)
    return ds


def score_backward(dscore_nla, dscore_la, routing: ChunkRouting, pooled, W_score, C,
                   with_bias=False):
    """Returns (dW_score, dX_contrib[, dbias]) for the straight-through score path."""
    ds = np.swapaxes(score_grad(dscore_nla, dscore_la, routing), -3, -2)
    ds = ds.reshape(ds.shape[:-2] + (-1,))            # [..., n, groups * 2]
    D = pooled.shape[-1]
    dW = pooled.reshape(-1, D).T @ ds.reshape(-1, ds.shape[-1])
    dX = mean_pool_chunks_backward(ds @ W_score.T, C)
    if with_bias:
        return dW, dX, ds.reshape(-1, ds.shape[-1]).sum(axis=0)
    return dW, dX
