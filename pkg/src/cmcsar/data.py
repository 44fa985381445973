"""Scenes, patch grids, dataset splits and the synthetic scene generator.

A scene bundles three co-registered rasters: ``sar`` (HH, VV, HV stacked as
3 channels), ``eo`` (3 channels) and ``gt`` (1 channel, binary footprint).
The generator draws rectangular "buildings" and renders an optical image with
little noise and a SAR image with bright wall returns, radar shadow and
multiplicative gamma speckle, so the mask is easy to read from EO and hard to
read from SAR.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import augment
from .errors import CoverageError, DataError, GeometryError, RegistrationError
from .io import load_container, save_container

MODALITY_KEYS = {"SAR": "sar", "EO": "eo", "GT": "gt"}

# fixed normalisation so stored rasters are roughly zero-mean, unit-scale
_SAR_DB_CENTER, _SAR_DB_SCALE = -6.0, 5.0
_EO_CENTER, _EO_SCALE = 0.45, 0.2

SAR_ROOF = 0.25
SAR_SHADOW = 4


@dataclass
class SceneBundle:
    scene_id: str
    sar: np.ndarray
    eo: np.ndarray
    gt: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {self.sar.shape[1:], self.eo.shape[1:], self.gt.shape[1:]}
        if len(shapes) != 1:
            raise RegistrationError(f"scene {self.scene_id}: rasters not co-registered {sorted(shapes)}")
        if not np.isin(self.gt, (0.0, 1.0)).all():
            raise DataError(f"scene {self.scene_id}: gt mask is not binary")

    @property
    def extent(self):
        return self.gt.shape[1:]

    def modality(self, name):
        return getattr(self, MODALITY_KEYS[name])

    def tiles(self, modalities=("SAR", "EO", "GT")):
        return {m: self.modality(m) for m in modalities}


@dataclass(frozen=True)
class PatchGrid:
    size: int
    stride: int
    extent: tuple
    offsets: tuple

    def __len__(self):
        return len(self.offsets)

    def coverage(self):
        cov = np.zeros(self.extent, dtype=np.int32)
        for y, x in self.offsets:
            cov[y : y + self.size, x : x + self.size] += 1
        return cov


def _axis_offsets(extent, s, r):
    offs = list(range(0, extent - s + 1, r))
    if offs[-1] != extent - s:
        offs.append(extent - s)
    return offs


def make_grid(extent, size, stride):
    """Sliding-window offsets; an off-lattice last window is snapped to ``extent - size``."""
    h, w = (extent, extent) if np.isscalar(extent) else tuple(extent)
    if size > h or size > w:
        raise GeometryError(f"patch size {size} exceeds extent {h}x{w}")
    if stride < 1 or size < 1:
        raise GeometryError("patch size and stride must be >= 1")
    ys = _axis_offsets(h, size, stride)
    xs = _axis_offsets(w, size, stride)
    return PatchGrid(size, stride, (h, w), tuple((y, x) for y in ys for x in xs))


@dataclass
class PatchSet:
    scene_id: str
    offset: tuple
    tiles: dict


def extract(bundle, grid, resize_to=None, modalities=("SAR", "EO", "GT")):
    if tuple(bundle.extent) != tuple(grid.extent):
        raise GeometryError(f"grid built for {grid.extent}, scene is {bundle.extent}")
    s = grid.size
    out = []
    for y, x in grid.offsets:
        tiles = {m: bundle.modality(m)[:, y : y + s, x : x + s] for m in modalities}
        if resize_to is not None and resize_to != s:
            tiles = augment._resize(tiles, resize_to, resize_to, set(augment.MASK_KEYS) & set(tiles))
        else:
            tiles = {m: np.ascontiguousarray(t) for m, t in tiles.items()}
        out.append(PatchSet(bundle.scene_id, (y, x), tiles))
    return out


def merge(predictions, grid, extent=None):
    """Average overlapping ``1×s×s`` probability patches back into one scene."""
    extent = grid.extent if extent is None else ((extent, extent) if np.isscalar(extent) else tuple(extent))
    s = grid.size
    by_offset = {tuple(off): np.asarray(p) for off, p in predictions}
    missing = [o for o in grid.offsets if o not in by_offset]
    if missing:
        raise CoverageError(f"no prediction for offsets {missing[:4]}")
    acc = np.zeros((1,) + tuple(extent), dtype=np.float64)
    cnt = np.zeros(tuple(extent), dtype=np.int64)
    for off in grid.offsets:
        y, x = off
        p = by_offset[off].reshape(1, s, s)
        acc[:, y : y + s, x : x + s] += p
        cnt[y : y + s, x : x + s] += 1
    if (cnt == 0).any():
        raise CoverageError("grid leaves pixels uncovered")
    return (acc / cnt).astype(np.float32)


# --------------------------------------------------------------------- generator


def _rect_mask(rng, extent):
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64)
    mask = np.zeros((extent, extent), dtype=bool)
    for _ in range(int(rng.integers(2, 7))):
        cy, cx = rng.uniform(0.1, 0.9, size=2) * extent
        a, b = rng.uniform(0.06, 0.16, size=2) * extent
        ang = 0.0 if rng.random() < 0.5 else rng.uniform(0, math.pi / 2)
        c, s = math.cos(ang), math.sin(ang)
        u = (yy - cy) * c + (xx - cx) * s
        v = -(yy - cy) * s + (xx - cx) * c
        mask |= (np.abs(u) <= a) & (np.abs(v) <= b)
    return mask


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def speckle_looks(difficulty):
    """Equivalent number of looks of the gamma speckle; fewer looks is noisier."""
    return 1.0 + 4.0 * (1.0 - float(difficulty))


def synth_scene(seed, extent=64, difficulty=0.5, scene_id=None):
    if extent < 32:
        raise GeometryError("synthetic scenes need extent >= 32")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    mask = _rect_mask(rng, extent)
    m = mask.astype(np.float64)

    # optical: smooth ground texture, flat bright roofs, mild sensor noise
    ground = np.array([0.30, 0.38, 0.26])[:, None, None] + 0.05 * np.stack(
        [_smooth_noise(rng, (extent, extent), 4.0) for _ in range(3)]
    )
    labels, n_lab = ndimage.label(mask)
    roof = np.zeros((3, extent, extent))
    for lab in range(1, n_lab + 1):
        colour = rng.uniform(0.62, 0.85) + rng.uniform(-0.05, 0.05, size=3)
        roof[:, labels == lab] = colour[:, None]
    eo = ground * (1 - m) + roof * m + 0.03 * rng.standard_normal((3, extent, extent))

    # radar: textured clutter, roofs barely brighter than clutter, a bright
    # double-bounce line on the sensor-facing (left) wall, shadow on the far side
    near_wall = mask & ~np.roll(mask, 1, axis=1)
    near_wall[:, 0] = mask[:, 0]
    near_wall = ndimage.binary_dilation(near_wall, structure=np.ones((1, 2), bool)) & mask
    shadow = np.zeros_like(mask)
    for k in range(1, SAR_SHADOW + 1):
        shifted = np.roll(mask, k, axis=1)
        shifted[:, :k] = False
        shadow |= shifted
    shadow &= ~mask
    clutter = 0.2 * np.exp(0.5 * _smooth_noise(rng, (extent, extent), 2.0))
    resp = np.where(mask, SAR_ROOF * np.exp(0.3 * _smooth_noise(rng, (extent, extent), 1.5)), clutter)
    resp = np.where(shadow, 0.03, resp)
    resp = np.where(near_wall, 3.0, resp)
    looks = speckle_looks(difficulty)
    common = rng.gamma(looks, 1.0 / looks, size=(extent, extent))
    sar = []
    for gain in (1.0, 0.8, 0.35):  # HH, VV, HV
        own = rng.gamma(looks, 1.0 / looks, size=(extent, extent))
        intensity = gain * resp * (0.7 * common + 0.3 * own)
        db = 10.0 * np.log10(intensity + 1e-3)
        sar.append((db - _SAR_DB_CENTER) / _SAR_DB_SCALE)

    return SceneBundle(
        scene_id=scene_id or f"synth_{seed}",
        sar=np.stack(sar).astype(np.float32),
        eo=((eo - _EO_CENTER) / _EO_SCALE).astype(np.float32),
        gt=m[None].astype(np.float32),
        metadata={"gsd": 0.5, "source": "synthetic", "seed": int(seed), "difficulty": float(difficulty)},
    )


# --------------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitManifest:
    train: tuple
    val: tuple
    seed: int
    ratio: float

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "seed": self.seed, "ratio": self.ratio}


def split(scene_ids, seed=0, ratio=0.8):
    ids = list(scene_ids)
    if len(ids) < 2:
        raise DataError("need at least 2 scenes to split")
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = min(len(ids) - 1, math.ceil(round(ratio * len(ids), 9)))
    train = tuple(ids[i] for i in order[:n_train])
    val = tuple(ids[i] for i in order[n_train:])
    return SplitManifest(train, val, int(seed), float(ratio))


# --------------------------------------------------------------------- datasets


def scene_seed(base_seed, index):
    return int(np.random.default_rng([int(base_seed), int(index)]).integers(0, 2**31 - 1))


def generate_scenes(n, extent=64, seed=0, difficulty=0.5):
    return [
        synth_scene(scene_seed(seed, i), extent, difficulty, scene_id=f"scene_{i:04d}") for i in range(n)
    ]


@dataclass
class SceneDataset:
    scenes: list
    manifest: SplitManifest
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {s.scene_id: s for s in self.scenes}

    def get(self, scene_id):
        try:
            return self._by_id[scene_id]
        except KeyError:
            raise DataError(f"unknown scene {scene_id!r}") from None

    def subset(self, name):
        ids = {"train": self.manifest.train, "val": self.manifest.val}[name]
        return [self.get(i) for i in ids]

    @property
    def extent(self):
        return self.scenes[0].extent


def synthetic_dataset(n_scenes=20, extent=64, seed=0, difficulty=0.5, split_seed=None, ratio=0.8):
    scenes = generate_scenes(n_scenes, extent, seed, difficulty)
    split_seed = seed if split_seed is None else split_seed
    manifest = split([s.scene_id for s in scenes], split_seed, ratio)
    params = {"n_scenes": n_scenes, "extent": extent, "seed": seed, "difficulty": difficulty}
    return SceneDataset(scenes, manifest, params)


def save_dataset(dataset, root):
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    for s in dataset.scenes:
        save_container(root / "scenes" / f"{s.scene_id}.cmct", {"sar": s.sar, "eo": s.eo, "gt": s.gt})
    h, w = dataset.extent
    manifest = {
        "version": 1,
        "extent": [h, w],
        "generator": dataset.params,
        "split_seed": dataset.manifest.seed,
        "split_ratio": dataset.manifest.ratio,
        "scenes": [{"id": s.scene_id, "metadata": s.metadata} for s in dataset.scenes],
        "train": list(dataset.manifest.train),
        "val": list(dataset.manifest.val),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(root):
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest in {root}: {exc}") from None
    if manifest.get("version") != 1:
        raise DataError(f"unsupported dataset version {manifest.get('version')}")
    scenes = []
    for entry in manifest["scenes"]:
        arrs = load_container(root / "scenes" / f"{entry['id']}.cmct")
        missing = {"sar", "eo", "gt"} - set(arrs)
        if missing:
            raise DataError(f"scene {entry['id']} lacks entries {sorted(missing)}")
        scenes.append(SceneBundle(entry["id"], arrs["sar"], arrs["eo"], arrs["gt"], entry.get("metadata", {})))
    split_ = SplitManifest(
        tuple(manifest["train"]), tuple(manifest["val"]), manifest["split_seed"], manifest["split_ratio"]
    )
    return SceneDataset(scenes, split_, manifest.get("generator", {}))
