"""Central finite differences for the gradient checks."""
import numpy as np


def fd_grad(f, x, idx, step=1e-6):
    """d f / d x[idx] by central differences; restores x afterwards."""
    old = x[idx]
    x[idx] = old + step
    fp = f()
    x[idx] = old - step
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * step)


def rel_err(analytic, numeric, floor=1e-10):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def sample_indices(rng, shape, k):
    """k coordinates of an array of this shape (all of them when it is small)."""
    size = int(np.prod(shape))
    flat = np.arange(size) if size <= k else rng.choice(size, size=k, replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def worst_rel_err(f, x, grad, rng, k=24, step=1e-6, floor=1e-10):
    worst = 0.0
    for idx in sample_indices(rng, x.shape, k):
        worst = max(worst, rel_err(grad[idx], fd_grad(f, x, idx, step), floor))
    return worst
