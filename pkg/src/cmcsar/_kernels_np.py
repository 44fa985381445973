"""Pure-numpy implementations of the hot kernels.

These are the fallback path (``CMC_BACKEND=numpy``) and the reference the
numba versions are tested against. Signatures match ``_kernels_nb`` exactly.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, k, stride, oh, ow):
    """Unfold padded input ``(b, c, hp, wp)`` into ``(c*k*k, b*oh*ow)`` columns."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * oh : stride, : stride * ow : stride]
    # (b, c, oh, ow, k, k) -> (c, k, k, b, oh, ow)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, b * oh * ow)


def col2im(cols, b, c, hp, wp, k, stride, oh, ow):
    """Scatter-add columns back onto a zero padded input of shape ``(b, c, hp, wp)``."""
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    g = cols.reshape(c, k, k, b, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += g[:, :, ki, kj]
    return out


def sample_bilinear(img, sy, sx):
    """Bilinear sampling of ``img (c, h, w)`` at float source coordinates, zero outside."""
    c, h, w = img.shape
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    wy = (sy - y0).astype(img.dtype)
    wx = (sx - x0).astype(img.dtype)
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)

    def tap(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        v = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(valid, v, img.dtype.type(0))

    p00 = tap(y0, x0)
    p01 = tap(y0, x0 + 1)
    p10 = tap(y0 + 1, x0)
    p11 = tap(y0 + 1, x0 + 1)
    one = img.dtype.type(1)
    top = (one - wx) * p00 + wx * p01
    bot = (one - wx) * p10 + wx * p11
    return ((one - wy) * top + wy * bot).astype(img.dtype)


def sample_nearest(img, sy, sx):
    c, h, w = img.shape
    yi = np.floor(sy + 0.5).astype(np.int64)
    xi = np.floor(sx + 0.5).astype(np.int64)
    valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    v = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(valid, v, img.dtype.type(0)).astype(img.dtype)
