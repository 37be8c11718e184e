"""Dense-array primitives with hand-written gradient counterparts.

Arrays are plain ``numpy.ndarray``; the dtype is the precision flag
(float32 for training and benchmarks, float64 for gradient checks). Every
``foo`` that participates in training has a ``foo_backward`` taking the
output cotangent and returning input cotangents.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_DEBUG_FINITE = False


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Raised when a non-finite value shows up and finiteness checks are on."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def set_debug_finite(flag: bool) -> None:
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(flag)


def check_finite(x, name="tensor"):
    if _DEBUG_FINITE and not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {name}")
    return x


def dtype_for(precision: str):
    try:
        return {"f32": np.float32, "f64": np.float64}[precision]
    except KeyError:
        raise ValueError(f"precision must be 'f32' or 'f64', got {precision!r}") from None


# ---------------------------------------------------------------- matmul

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def matmul_backward(dc, a, b):
    return dc @ b.T, a.T @ dc


def linear(x, w, bias=None):
    """``x[..., k] @ w[k, n] (+ bias)``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} x {w.shape}")
    y = x @ w
    if bias is not None:
        y = y + bias
    return y


def linear_backward(dy, x, w, with_bias=False):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = dy @ w.T
    dw = x2.T @ dy2
    if with_bias:
        return dx, dw, dy2.sum(axis=0)
    return dx, dw


# ---------------------------------------------------------------- softmax

def softmax_row(x, visible=None):
    """Row softmax restricted to ``visible`` entries; hidden entries are exactly 0."""
    if visible is None:
        visible = np.ones(x.shape, dtype=bool)
    visible = np.broadcast_to(visible, x.shape)
    if not np.all(visible.any(axis=-1)):
        raise ValueError("softmax_row: a row has no visible entries")
    z = np.where(visible, x, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(visible, np.exp(z), 0.0)
    return check_finite(e / e.sum(axis=-1, keepdims=True), "softmax_row")


def softmax_row_backward(dy, y):
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- norms

def rmsnorm(x, gamma, eps=1e-6):
    rstd = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return check_finite(x * rstd * gamma, "rmsnorm")


def rmsnorm_backward(dy, x, gamma, eps=1e-6):
    d = x.shape[-1]
    rstd = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * rstd
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    g = dy * gamma
    dx = rstd * (g - xhat * np.mean(g * xhat, axis=-1, keepdims=True))
    return dx, dgamma


def l2_normalize(x, eps=1e-6):
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / (n + eps)


def l2_normalize_backward(dy, x, eps=1e-6):
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    den = n + eps
    safe_n = np.where(n > 0, n, 1.0)
    proj = np.sum(x * dy, axis=-1, keepdims=True)
    return dy / den - x * proj / (den * den * safe_n)


# ---------------------------------------------------------------- activations

def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def activation(kind, x):
    x = np.asarray(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "silu":
        return x * sigmoid(x)
    if kind == "softplus":
        return softplus(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind, dy, x):
    s = sigmoid(np.asarray(x))
    if kind == "sigmoid":
        return dy * s * (1.0 - s)
    if kind == "silu":
        return dy * s * (1.0 + x * (1.0 - s))
    if kind == "softplus":
        return dy * s
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- short conv

def depthwise_causal_conv(x, kernels, tail=None):
    """Causal depthwise conv along axis -2.

    x: [..., L, d]; kernels: [d, kw]; tail: [..., kw-1, d] holding the inputs
    preceding x[..., 0, :] (zeros when omitted).
    ``y[t, c] = sum_j kernels[c, j] * x[t - kw + 1 + j, c]``.
    """
    d, kw = kernels.shape
    if x.shape[-1] != d:
        raise ShapeError(f"conv channel mismatch: x {x.shape}, kernels {kernels.shape}")
    lead = x.shape[:-2]
    if tail is None:
        tail = np.zeros(lead + (kw - 1, d), dtype=x.dtype)
    elif tail.shape != lead + (kw - 1, d):
        raise ShapeError(f"conv tail shape {tail.shape} != {lead + (kw - 1, d)}")
    L = x.shape[-2]
    xp = np.concatenate([tail, x], axis=-2)
    y = np.zeros_like(x)
    for j in range(kw):
        y += kernels[:, j] * xp[..., j:j + L, :]
    return y


def depthwise_causal_conv_backward(dy, x, kernels):
    """Gradients for training mode (zero tail)."""
    d, kw = kernels.shape
    L = x.shape[-2]
    pad = np.zeros(x.shape[:-2] + (kw - 1, d), dtype=x.dtype)
    xp = np.concatenate([pad, x], axis=-2)
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernels)
    dy2 = dy.reshape(-1, L, d)
    xp2 = xp.reshape(-1, L + kw - 1, d)
    for j in range(kw):
        dxp[..., j:j + L, :] += kernels[:, j] * dy
        dk[:, j] = np.einsum("blc,blc->c", dy2, xp2[:, j:j + L, :])
    return dxp[..., kw - 1:, :], dk


# ---------------------------------------------------------------- pooling

def mean_pool_chunks(x, C):
    L, d = x.shape[-2], x.shape[-1]
    if L % C != 0:
        raise ShapeError(f"sequence length {L} is not a multiple of chunk size {C}; pad upstream")
    return x.reshape(x.shape[:-2] + (L // C, C, d)).mean(axis=-2)


def mean_pool_chunks_backward(dy, C):
    return np.repeat(dy / C, C, axis=-2)


# ---------------------------------------------------------------- loss

def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets, ignore=-100):
    """Mean negative log-likelihood over positions whose target != ignore."""
    targets = np.asarray(targets)
    keep = targets != ignore
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is ignored")
    V = logits.shape[-1]
    lp = _log_softmax(logits).reshape(-1, V)
    t = targets.reshape(-1)
    k = keep.reshape(-1)
    if np.any((t[k] < 0) | (t[k] >= V)):
        raise ValueError("cross_entropy: target out of range")
    return float(-lp[np.flatnonzero(k), t[k]].sum() / n)


def cross_entropy_backward(logits, targets, ignore=-100):
    targets = np.asarray(targets)
    keep = targets != ignore
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is ignored")
    V = logits.shape[-1]
    p = np.exp(_log_softmax(logits)).reshape(-1, V)
    t = targets.reshape(-1)
    k = keep.reshape(-1)
    rows = np.flatnonzero(k)
    p[rows, t[k]] -= 1.0
    p[~k] = 0.0
    return (p / n).reshape(logits.shape).astype(logits.dtype, copy=False)


# ---------------------------------------------------------------- parameters

@dataclass
class ParamStore:
    """Named parameters with paired gradient accumulators."""

    values: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)

    def add(self, name, value):
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.asarray(value)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def names(self):
        return list(self.values)

    def accumulate(self, name, g):
        if g.shape != self.values[name].shape:
            raise ShapeError(f"grad for {name}: {g.shape} != {self.values[name].shape}")
        self.grads[name] += g

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def num_params(self):
        return int(sum(v.size for v in self.values.values()))

    def astype(self, dtype):
        out = ParamStore()
        for k, v in self.values.items():
            out.add(k, v.astype(dtype, copy=True))
        return out

    def copy(self):
        out = ParamStore()
        for k, v in self.values.items():
            out.add(k, v.copy())
        return out
