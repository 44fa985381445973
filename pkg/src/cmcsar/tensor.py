"""Dense tensors with tape-based reverse-mode differentiation.

Each op returns a new :class:`Tensor` that remembers its parents and a closure
that pushes the output gradient back into them. ``Tensor.backward`` walks the
graph once in reverse topological order and then releases it; a second call
on the same graph raises :class:`GraphError`.

Values are float32 unless a tensor is built from float64 data, in which case
the dtype is carried through every op (gradient checks use this). Reductions
accumulate in float64. No broadcasting beyond 0-d scalars.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import (
    DegenerateBatchError,
    DimensionError,
    DomainError,
    GeometryError,
    GraphError,
    NonFiniteError,
)

__all__ = [
    "Tensor",
    "BatchNormState",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "sigmoid",
    "elementwise",
    "matmul",
    "add_bias",
    "reduce",
    "tsum",
    "mean",
    "logsumexp",
    "reshape",
    "transpose",
    "concat",
    "conv2d",
    "avg_pool2",
    "upsample_nearest",
    "global_avg_pool",
    "batchnorm",
    "batchnorm2d",
    "l2_normalize",
    "bce_with_logits",
]


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._done = False

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out._op = op
        out._done = False
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.grad = None
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out.grad = None
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``.

        ``grad`` defaults to 1 for single-element tensors. The graph is freed
        afterwards.
        """
        if not self.requires_grad:
            raise GraphError("backward on a tensor that does not require grad")
        if self._done:
            raise GraphError("graph already consumed by a previous backward; re-run forward")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("implicit gradient only for single-element outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != {self.data.shape}")

        order = _topo(self)
        for node in order:
            if node._backward is not None:
                node.grad = np.zeros_like(node.data)
        if self._backward is None:
            self.grad = self.grad + grad
        else:
            self.grad = grad.copy()
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
        for node in order:
            if node._backward is not None:
                node._done = True
                node._backward = None
                node._parents = ()

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _acc(t, g):
    if t.requires_grad:
        t.grad += g


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _check_binary(a, b, op):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast)")


def _unbroadcast(g, shape):
    if shape == () and g.shape != ():
        return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype)
    return g


# --------------------------------------------------------------------- elementwise


def add(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_binary(a, b, "add")

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_binary(a, b, "sub")

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_binary(a, b, "mul")

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_binary(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def backward(g):
        _acc(a, _unbroadcast(g / b.data, a.shape))
        _acc(b, _unbroadcast(-g * out / b.data, b.shape))

    return Tensor._result(out, (a, b), backward, "div")


def scale(a, c):
    c = float(c)

    def backward(g):
        _acc(a, g * a.data.dtype.type(c))

    return Tensor._result(a.data * a.data.dtype.type(c), (a,), backward, "scale")


def neg(a):
    return scale(a, -1.0)


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        _acc(a, g * out)

    return Tensor._result(out, (a,), backward, "exp")


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")

    def backward(g):
        _acc(a, g / a.data)

    return Tensor._result(np.log(a.data), (a,), backward, "log")


def sqrt(a):
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    if np.any(out == 0) and a.requires_grad:
        raise DomainError("sqrt gradient undefined at 0")

    def backward(g):
        _acc(a, g * 0.5 / out)

    return Tensor._result(out, (a,), backward, "sqrt")


def relu(a):
    mask = a.data > 0

    def backward(g):
        _acc(a, g * mask)

    return Tensor._result(np.where(mask, a.data, a.data.dtype.type(0)), (a,), backward, "relu")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g):
        _acc(a, g * out * (1 - out))

    return Tensor._result(out, (a,), backward, "sigmoid")


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sub": sub,
    "exp": exp,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "scale": scale,
}


def elementwise(op, *args):
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --------------------------------------------------------------------- linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def add_bias(x, b, axis=1):
    """Add a 1-D bias along ``axis`` (features of ``(n, d)``, channels of ``(n, c, h, w)``)."""
    if b.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        _acc(x, g)
        if b.requires_grad:
            b.grad += g.sum(axis=other, dtype=np.float64).astype(b.data.dtype)

    return Tensor._result(x.data + b.data.reshape(view), (x, b), backward, "add_bias")


# --------------------------------------------------------------------- reductions


def _check_axis(x, axis):
    if axis is None:
        if x.data.size == 0:
            raise DomainError("reduction over an empty tensor")
        return None
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    axis %= x.ndim
    if x.shape[axis] == 0:
        raise DomainError("reduction over an empty axis")
    return axis


def _expand(g, axis, shape):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def tsum(x, axis=None):
    axis = _check_axis(x, axis)
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64), dtype=x.data.dtype)

    def backward(g):
        _acc(x, _expand(g, axis, x.shape))

    return Tensor._result(out, (x,), backward, "sum")


def mean(x, axis=None):
    axis = _check_axis(x, axis)
    n = x.data.size if axis is None else x.shape[axis]
    out = np.asarray(x.data.mean(axis=axis, dtype=np.float64), dtype=x.data.dtype)

    def backward(g):
        _acc(x, _expand(g, axis, x.shape) / x.data.dtype.type(n))

    return Tensor._result(out, (x,), backward, "mean")


def logsumexp(x, axis=None, where=None):
    """``max(v) + log(sum(exp(v - max(v))))`` over ``axis``.

    ``where`` (boolean, same shape as ``x``) restricts the reduction to the
    selected entries; masked entries get zero gradient.
    """
    axis = _check_axis(x, axis)
    v = x.data.astype(np.float64)
    if where is not None:
        where = np.asarray(where, dtype=bool)
        if where.shape != x.shape:
            raise DimensionError(f"logsumexp mask {where.shape} != {x.shape}")
        if not np.all(where.any(axis=axis)):
            raise DomainError("logsumexp over an empty (fully masked) slice")
        v = np.where(where, v, -np.inf)
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    s = e.sum(axis=axis, keepdims=True)
    lse = m + np.log(s)
    soft = (e / s).astype(x.data.dtype)
    out = np.asarray(lse.squeeze(axis) if axis is not None else lse.reshape(()), dtype=x.data.dtype)

    def backward(g):
        _acc(x, _expand(g, axis, x.shape) * soft)

    return Tensor._result(out, (x,), backward, "logsumexp")


_REDUCE = {"sum": tsum, "mean": mean, "logsumexp": logsumexp}


def reduce(op, x, axis=None):
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    return fn(x, axis)


# --------------------------------------------------------------------- shape ops


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        _acc(x, g.reshape(x.shape))

    return Tensor._result(out, (x,), backward, "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _acc(x, g.transpose(inv))

    return Tensor._result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "transpose")


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.grad += g[tuple(idx)]

    return Tensor._result(out, tensors, backward, "concat")


# --------------------------------------------------------------------- spatial


def conv2d(x, kernels_, bias=None, stride=1, pad=0):
    """Cross-correlation of ``x`` (``c×h×w`` or ``b×c×h×w``) with ``c_out×c_in×k×k`` kernels."""
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels_.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks {x.shape}, {kernels_.shape}")
    b, c, h, w = xd.shape
    co, ci, k, k2 = kernels_.shape
    if ci != c or k != k2:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {kernels_.shape}")
    if k % 2 == 0:
        raise GeometryError(f"conv2d: kernel size {k} must be odd")
    if stride < 1 or pad < 0:
        raise GeometryError("conv2d: stride must be >= 1 and pad >= 0")
    span_h, span_w = h + 2 * pad - k, w + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise GeometryError(
            f"conv2d: output extent ({h}+2*{pad}-{k})/{stride}+1 is not integral for input {h}x{w}"
        )
    oh, ow = span_h // stride + 1, span_w // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(xd)
    cols = kernels.im2col(xp, k, stride, oh, ow)
    wmat = kernels_.data.reshape(co, -1)
    out = (wmat @ cols).reshape(co, b, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        if bias.shape != (co,):
            raise DimensionError(f"conv2d: bias {bias.shape} != ({co},)")
        out = out + bias.data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)
    if single:
        out = out[0]
    parents = (x, kernels_) if bias is None else (x, kernels_, bias)

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(co, -1)
        if kernels_.requires_grad:
            kernels_.grad += (gmat @ cols.T).reshape(kernels_.shape)
        if bias is not None and bias.requires_grad:
            bias.grad += g4.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.data.dtype)
        if x.requires_grad:
            dcols = wmat.T @ gmat
            dxp = kernels.col2im(dcols, b, c, h + 2 * pad, w + 2 * pad, k, stride, oh, ow)
            dx = dxp[:, :, pad : pad + h, pad : pad + w]
            x.grad += dx[0] if single else dx

    return Tensor._result(out, parents, backward, "conv2d")


def _spatial4(x, op):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"{op}: expected c×h×w or b×c×h×w, got {x.shape}")


def avg_pool2(x):
    """2×2 average pooling with stride 2."""
    xd, single = _spatial4(x, "avg_pool2")
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise GeometryError(f"avg_pool2: extent {h}x{w} not divisible by 2")
    out = xd.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=np.float64).astype(xd.dtype)
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        dx = np.repeat(np.repeat(g4, 2, axis=2), 2, axis=3) * xd.dtype.type(0.25)
        _acc(x, dx[0] if single else dx)

    return Tensor._result(out, (x,), backward, "avg_pool2")


def upsample_nearest(x, factor=2):
    xd, single = _spatial4(x, "upsample_nearest")
    b, c, h, w = xd.shape
    out = np.repeat(np.repeat(xd, factor, axis=2), factor, axis=3)
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        dx = g4.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5), dtype=np.float64).astype(xd.dtype)
        _acc(x, dx[0] if single else dx)

    return Tensor._result(out, (x,), backward, "upsample_nearest")


def global_avg_pool(x):
    """``b×c×h×w`` -> ``b×c`` (or ``c×h×w`` -> ``c``)."""
    xd, single = _spatial4(x, "global_avg_pool")
    b, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3), dtype=np.float64).astype(xd.dtype)
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        dx = np.broadcast_to(g4[:, :, None, None], xd.shape) / xd.dtype.type(h * w)
        _acc(x, dx[0] if single else dx)

    return Tensor._result(out, (x,), backward, "global_avg_pool")


# --------------------------------------------------------------------- normalisation


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        self.running_mean = np.zeros(dim, dtype=np.float32)
        self.running_var = np.ones(dim, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def copy(self):
        new = BatchNormState(len(self.running_mean), self.momentum, self.eps)
        new.running_mean = self.running_mean.copy()
        new.running_var = self.running_var.copy()
        return new


def batchnorm(x, gamma, beta, mode, state):
    """Batch normalisation over the rows of ``x`` (``b×d``).

    Train mode normalises with batch statistics and updates ``state`` in place
    (unbiased variance for the running estimate). Eval mode uses ``state``.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[0]
    dt = x.data.dtype
    if mode == "train":
        if n < 2:
            raise DegenerateBatchError("batchnorm in train mode needs at least 2 rows")
        mu = x.data.mean(axis=0, dtype=np.float64)
        var = x.data.var(axis=0, dtype=np.float64)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(np.float32)
        state.running_var = ((1 - m) * state.running_var + m * var * n / (n - 1)).astype(np.float32)
    elif mode == "eval":
        mu = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = ((x.data - mu) * inv).astype(dt)
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=0, dtype=np.float64).astype(dt)
        if beta.requires_grad:
            beta.grad += g.sum(axis=0, dtype=np.float64).astype(dt)
        if x.requires_grad:
            gx = g * gamma.data
            if mode == "train":
                s1 = gx.mean(axis=0, dtype=np.float64)
                s2 = (gx * xhat).mean(axis=0, dtype=np.float64)
                dx = (gx - s1 - xhat * s2) * inv
            else:
                dx = gx * inv
            x.grad += dx.astype(dt)

    return Tensor._result(out.astype(dt), (x, gamma, beta), backward, "batchnorm")


def batchnorm2d(x, gamma, beta, mode, state):
    """Per-channel batchnorm of ``b×c×h×w`` maps, statistics over ``b·h·w``."""
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects b×c×h×w, got {x.shape}")
    b, c, h, w = x.shape
    rows = reshape(transpose(x, (0, 2, 3, 1)), (b * h * w, c))
    out = batchnorm(rows, gamma, beta, mode, state)
    return transpose(reshape(out, (b, h, w, c)), (0, 3, 1, 2))


def l2_normalize(x, axis=-1):
    """Scale slices along ``axis`` to unit Euclidean norm; zero-norm slices are a domain error."""
    axis = _check_axis(x, axis)
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DomainError("l2_normalize: zero-norm vector")
    u = (x.data / norm).astype(x.data.dtype)

    def backward(g):
        proj = (g * u).sum(axis=axis, keepdims=True, dtype=np.float64)
        _acc(x, ((g - u * proj) / norm).astype(x.data.dtype))

    return Tensor._result(u, (x,), backward, "l2_normalize")


def bce_with_logits(logits, target):
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a constant 0/1 target."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs target {t.shape}")
    x = logits.data.astype(np.float64)
    # log(1 + e^x) - t*x, written to avoid overflow
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = np.asarray(per.sum() / n, dtype=logits.data.dtype)
    e = np.exp(-np.abs(x))
    p = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        _acc(logits, (g * (p - t) / n).astype(logits.data.dtype))

    return Tensor._result(out, (logits,), backward, "bce_with_logits")
