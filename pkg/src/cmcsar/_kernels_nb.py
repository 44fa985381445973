"""Numba-compiled kernels, loop-for-loop equivalents of ``_kernels_np``.

All loops run serially in index-ascending order so results are reproducible
run to run.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, k, stride, oh, ow):
    b, c = xp.shape[0], xp.shape[1]
    n = b * oh * ow
    cols = np.empty((c * k * k, n), dtype=xp.dtype)
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for bi in range(b):
                    base = bi * oh * ow
                    for i in range(oh):
                        y = i * stride + ki
                        for j in range(ow):
                            cols[row, base + i * ow + j] = xp[bi, ci, y, j * stride + kj]
    return cols


@njit(cache=True)
def col2im(cols, b, c, hp, wp, k, stride, oh, ow):
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for bi in range(b):
        base = bi * oh * ow
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    for i in range(oh):
                        y = i * stride + ki
                        for j in range(ow):
                            out[bi, ci, y, j * stride + kj] += cols[row, base + i * ow + j]
    return out


@njit(cache=True)
def sample_bilinear(img, sy, sx):
    c, h, w = img.shape
    oh, ow = sy.shape
    out = np.zeros((c, oh, ow), dtype=img.dtype)
    for i in range(oh):
        for j in range(ow):
            fy = np.floor(sy[i, j])
            fx = np.floor(sx[i, j])
            wy = sy[i, j] - fy
            wx = sx[i, j] - fx
            y0 = int(fy)
            x0 = int(fx)
            in_y0 = 0 <= y0 < h
            in_y1 = 0 <= y0 + 1 < h
            in_x0 = 0 <= x0 < w
            in_x1 = 0 <= x0 + 1 < w
            for ch in range(c):
                p00 = img[ch, y0, x0] if (in_y0 and in_x0) else 0.0
                p01 = img[ch, y0, x0 + 1] if (in_y0 and in_x1) else 0.0
                p10 = img[ch, y0 + 1, x0] if (in_y1 and in_x0) else 0.0
                p11 = img[ch, y0 + 1, x0 + 1] if (in_y1 and in_x1) else 0.0
                top = (1.0 - wx) * p00 + wx * p01
                bot = (1.0 - wx) * p10 + wx * p11
                out[ch, i, j] = (1.0 - wy) * top + wy * bot
    return out


@njit(cache=True)
def sample_nearest(img, sy, sx):
    c, h, w = img.shape
    oh, ow = sy.shape
    out = np.zeros((c, oh, ow), dtype=img.dtype)
    for i in range(oh):
        for j in range(ow):
            y = int(np.floor(sy[i, j] + 0.5))
            x = int(np.floor(sx[i, j] + 0.5))
            if 0 <= y < h and 0 <= x < w:
                for ch in range(c):
                    out[ch, i, j] = img[ch, y, x]
    return out
