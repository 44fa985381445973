"""Seeded augmentation chains applied jointly to co-registered tiles.

A chain is an ordered list of ops. :func:`apply` draws each op's random
parameters once and applies them to every tile of the set, so SAR, EO and
mask stay pixel-aligned. Images are resampled bilinearly, masks by nearest
neighbour followed by re-binarisation at 0.5. Pixels rotated in from outside
the tile are 0.

Each op draws from its own generator keyed by ``(chain seed, key..., op kind,
occurrence)``; two chains that share an op therefore make the same decision
for it under the same seed and key, regardless of what precedes it.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .errors import RegistrationError

MASK_KEYS = ("GT", "gt")


@dataclass(frozen=True)
class Resize:
    ratio: float | None = None
    size: int | None = None
    kind = "resize"

    def target(self, h, w):
        if self.size is not None:
            return int(self.size), int(self.size)
        return int(math.floor(h * self.ratio)), int(math.floor(w * self.ratio))


@dataclass(frozen=True)
class RandomCrop:
    size: int
    kind = "random_crop"


@dataclass(frozen=True)
class HFlip:
    p: float = 0.5
    kind = "hflip"


@dataclass(frozen=True)
class VFlip:
    p: float = 0.5
    kind = "vflip"


@dataclass(frozen=True)
class Rotate:
    min_deg: float = -45.0
    max_deg: float = 45.0
    kind = "rotate"


@dataclass(frozen=True)
class GaussianBlur:
    kernel: int = 23
    sigma_min: float = 0.1
    sigma_max: float = 0.2
    p: float = 0.5
    kind = "gaussian_blur"

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"blur kernel must be odd, got {self.kernel}")


_OPS = {cls.kind: cls for cls in (Resize, RandomCrop, HFlip, VFlip, Rotate, GaussianBlur)}


@dataclass(frozen=True)
class AugmentChain:
    ops: tuple
    seed: int = 0

    def to_dict(self):
        return {"seed": self.seed, "ops": [{"op": op.kind, **asdict(op)} for op in self.ops]}

    @classmethod
    def from_dict(cls, d):
        ops = []
        for spec in d["ops"]:
            spec = dict(spec)
            ops.append(_OPS[spec.pop("op")](**spec))
        return cls(ops=tuple(ops), seed=int(d.get("seed", 0)))

    def with_seed(self, seed):
        return AugmentChain(self.ops, int(seed))


def blur_kernel_size(tile_size):
    """Blur kernel scaled to the tile: nearest odd to ``tile/20``, at least 3 (23 at 448 px)."""
    k = 2 * round((tile_size / 20 - 1) / 2) + 1
    return max(3, int(k))


def pretrain_chain(tile_size, seed=0):
    if tile_size < 8:
        raise ValueError("tile_size must be >= 8")
    return AugmentChain(
        ops=(
            Resize(ratio=1.2),
            RandomCrop(tile_size),
            HFlip(0.5),
            VFlip(0.5),
            Rotate(-45.0, 45.0),
            GaussianBlur(blur_kernel_size(tile_size), 0.1, 0.2, 0.5),
        ),
        seed=seed,
    )


def finetune_chain(tile_size, seed=0):
    return AugmentChain(ops=(Resize(size=tile_size), HFlip(0.5), VFlip(0.5)), seed=seed)


def _op_rng(seed, key, kind, occurrence):
    words = [int(seed) & 0xFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in key), zlib.crc32(kind.encode()), occurrence]
    return np.random.default_rng(words)


def _resample(tiles, sy, sx, masks):
    out = {}
    for name, t in tiles.items():
        t = np.ascontiguousarray(t)
        if name in masks:
            r = kernels.sample_nearest(t, sy, sx)
            out[name] = (r > 0.5).astype(t.dtype)
        else:
            out[name] = kernels.sample_bilinear(t, sy, sx)
    return out


def _resize(tiles, oh, ow, masks):
    h, w = next(iter(tiles.values())).shape[1:]
    if (oh, ow) == (h, w):
        return dict(tiles)
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    sy, sx = np.meshgrid(ys, xs, indexing="ij")
    return _resample(tiles, sy, sx, masks)


def _rotate(tiles, deg, masks):
    h, w = next(iter(tiles.values())).shape[1:]
    if deg == 0:
        return dict(tiles)
    th = math.radians(deg)
    c, s = math.cos(th), math.sin(th)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: output pixel -> source location
    sy = c * yy - s * xx + cy
    sx = s * yy + c * xx + cx
    return _resample(tiles, sy, sx, masks)


def _gauss1d(k, sigma):
    r = np.arange(k) - k // 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _blur(t, k, sigma):
    g = _gauss1d(k, sigma)
    pad = k // 2
    x = np.pad(t.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)), mode="reflect" if pad < min(t.shape[1:]) else "edge")
    h, w = t.shape[1:]
    rows = sum(g[i] * x[:, i : i + h, :] for i in range(k))
    out = sum(g[j] * rows[:, :, j : j + w] for j in range(k))
    return out.astype(t.dtype)


def apply(chain, tiles, key=(), masks=MASK_KEYS):
    """Run ``chain`` over a co-registered mapping ``name -> (c, h, w)`` array.

    ``key`` (tuple of ints) selects the random stream, e.g. ``(epoch, scene,
    view)``; the same chain, key and input always give the same output.
    """
    tiles = {n: np.asarray(t, dtype=np.float32) for n, t in tiles.items()}
    if not tiles:
        return {}
    extents = {t.shape[1:] for t in tiles.values()}
    if len(extents) != 1 or any(t.ndim != 3 for t in tiles.values()):
        raise RegistrationError(f"tiles are not co-registered: extents {sorted(extents)}")
    masks = set(masks) & set(tiles)
    seen = {}
    for op in chain.ops:
        occ = seen.get(op.kind, 0)
        seen[op.kind] = occ + 1
        rng = _op_rng(chain.seed, key, op.kind, occ)
        h, w = next(iter(tiles.values())).shape[1:]
        if isinstance(op, Resize):
            tiles = _resize(tiles, *op.target(h, w), masks)
        elif isinstance(op, RandomCrop):
            s = op.size
            if s > h or s > w:
                raise ValueError(f"crop {s} larger than extent {h}x{w}")
            y = int(rng.integers(0, h - s + 1))
            x = int(rng.integers(0, w - s + 1))
            tiles = {n: t[:, y : y + s, x : x + s] for n, t in tiles.items()}
        elif isinstance(op, HFlip):
            if rng.random() < op.p:
                tiles = {n: t[:, :, ::-1] for n, t in tiles.items()}
        elif isinstance(op, VFlip):
            if rng.random() < op.p:
                tiles = {n: t[:, ::-1, :] for n, t in tiles.items()}
        elif isinstance(op, Rotate):
            deg = float(rng.uniform(op.min_deg, op.max_deg)) if op.max_deg > op.min_deg else float(op.min_deg)
            tiles = _rotate(tiles, deg, masks)
        elif isinstance(op, GaussianBlur):
            fire = rng.random() < op.p
            sigma = float(rng.uniform(op.sigma_min, op.sigma_max))
            if fire:
                tiles = {n: (t if n in masks else _blur(t, op.kernel, sigma)) for n, t in tiles.items()}
        else:
            raise TypeError(f"unknown augmentation op {op!r}")
    return {n: np.ascontiguousarray(t) for n, t in tiles.items()}
