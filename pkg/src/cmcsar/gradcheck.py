"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

H = 1e-3


def numeric_grad(f, arrays, index, h=H):
    """d f / d arrays[index] by central differences; ``f`` maps float64 arrays to a float."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(*base)
        x[i] = orig - h
        fm = f(*base)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """``max |a - n| / max(max |n|, 1e-8)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-8))


def check(fn, arrays, h=H, seed_grad=None):
    """Largest relative error over all inputs between backprop and finite differences.

    ``fn(*tensors)`` must return a Tensor; non-scalar outputs are contracted
    with a fixed random ``seed_grad`` so every output entry is exercised.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*tensors)
    if seed_grad is None:
        seed_grad = np.random.default_rng(1234).standard_normal(out.shape)
    seed_grad = np.asarray(seed_grad, dtype=np.float64)
    out.backward(seed_grad)

    def scalar(*xs):
        o = fn(*[Tensor(x, dtype=np.float64) for x in xs])
        return float(np.sum(o.data * seed_grad))

    worst = 0.0
    for i, t in enumerate(tensors):
        worst = max(worst, rel_error(t.grad, numeric_grad(scalar, arrays, i, h)))
    return worst
