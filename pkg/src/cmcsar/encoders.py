"""Per-modality encoders, projection heads and the segmentation head.

Every modality gets its own encoder ``f_m`` and projection ``g_m`` built from
one shared :class:`EncoderSpec`, so the branches have identical shapes and
independent weights. An encoder block is
``conv3x3 -> batchnorm -> ReLU -> 2x2 avg-pool``; the projection is
``linear -> batchnorm -> ReLU -> linear``. The segmentation model reuses the
SAR encoder and decodes U-Net style: per level, nearest-neighbour upsampling,
concatenation with the encoder activation of the same resolution, then a 3x3
conv and ReLU. The "probe" head is a single 1x1 conv on the frozen bottleneck.

Parameter names::

    enc.<m>.conv<i>.w / .b, enc.<m>.bn<i>.gamma / .beta
    proj.<m>.fc0.w / .b, proj.<m>.bn.gamma / .beta, proj.<m>.fc1.w / .b
    dec.conv<i>.w / .b, dec.head.w / .b
    probe.w / probe.b
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, GeometryError, SpecMismatchError
from .tensor import BatchNormState, Tensor

MODALITIES = ("SAR", "EO", "GT")


@dataclass(frozen=True)
class EncoderSpec:
    channels: dict = field(default_factory=lambda: {"SAR": 3, "EO": 3, "GT": 1})
    widths: tuple = (8, 16, 32)
    kernel: int = 3
    proj_hidden: int = 32
    proj_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channels", dict(self.channels))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) <= 0:
            raise ValueError("widths must be positive")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.proj_hidden <= 0 or self.proj_dim <= 0:
            raise ValueError("projection dims must be positive")

    @property
    def feature_dim(self):
        return self.widths[-1]

    @property
    def downsample(self):
        return 2 ** len(self.widths)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def encoder_fingerprint(self, modality):
        blob = json.dumps(
            {"in": self.channels[modality], "widths": list(self.widths), "k": self.kernel}, sort_keys=True
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def param_shapes(spec):
    """Full parameter inventory ``name -> shape`` for ``spec``."""
    shapes = {}
    k = spec.kernel
    for m, cin in spec.channels.items():
        prev = cin
        for i, w in enumerate(spec.widths):
            shapes[f"enc.{m}.conv{i}.w"] = (w, prev, k, k)
            shapes[f"enc.{m}.conv{i}.b"] = (w,)
            shapes[f"enc.{m}.bn{i}.gamma"] = (w,)
            shapes[f"enc.{m}.bn{i}.beta"] = (w,)
            prev = w
        h, p = spec.proj_hidden, spec.proj_dim
        shapes[f"proj.{m}.fc0.w"] = (spec.feature_dim, h)
        shapes[f"proj.{m}.fc0.b"] = (h,)
        shapes[f"proj.{m}.bn.gamma"] = (h,)
        shapes[f"proj.{m}.bn.beta"] = (h,)
        shapes[f"proj.{m}.fc1.w"] = (h, p)
        shapes[f"proj.{m}.fc1.b"] = (p,)
    prev = spec.feature_dim
    for i in range(len(spec.widths)):
        skip = spec.widths[-1 - i]
        out = spec.widths[-2 - i] if i + 2 <= len(spec.widths) else spec.widths[0]
        shapes[f"dec.conv{i}.w"] = (out, prev + skip, k, k)
        shapes[f"dec.conv{i}.b"] = (out,)
        prev = out
    shapes["dec.head.w"] = (1, prev, 1, 1)
    shapes["dec.head.b"] = (1,)
    shapes["probe.w"] = (1, spec.feature_dim, 1, 1)
    shapes["probe.b"] = (1,)
    return shapes


def _fan_in(shape):
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def he_normal(rng, shape):
    """Normal(0, sqrt(2 / fan_in)) draws, fan_in taken from a conv or ``(in, out)`` linear shape."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / _fan_in(shape))).astype(np.float32)


def _param_rng(seed, name):
    # one stream per parameter name -> branches never share draws
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


@dataclass
class ModelWeights:
    spec: EncoderSpec
    params: dict
    bn: dict
    seed: int = 0
    step: int = 0
    seg_head: str = "decoder"

    @property
    def fingerprint(self):
        return self.spec.fingerprint()

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def copy(self):
        return ModelWeights(
            spec=self.spec,
            params={n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()},
            bn={n: s.copy() for n, s in self.bn.items()},
            seed=self.seed,
            step=self.step,
            seg_head=self.seg_head,
        )

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        """Flat ``name -> array`` map of parameters and batchnorm running statistics."""
        out = {n: p.data for n, p in self.params.items()}
        for n, s in self.bn.items():
            out[f"{n}.running_mean"] = s.running_mean
            out[f"{n}.running_var"] = s.running_var
        return out

    def content_hash(self):
        h = hashlib.sha256()
        arrays = self.state_arrays()
        for n in sorted(arrays):
            a = arrays[n]
            h.update(n.encode())
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def init_weights(spec, seed):
    """Fresh weights for every branch of ``spec``; deterministic per seed."""
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape, dtype=np.float32)
        elif name.endswith(".beta") or name.endswith(".b"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            arr = he_normal(_param_rng(seed, name), shape)
        params[name] = Tensor(arr, requires_grad=True)
    bn = {}
    for m in spec.channels:
        for i, w in enumerate(spec.widths):
            bn[f"enc.{m}.bn{i}"] = BatchNormState(w)
        bn[f"proj.{m}.bn"] = BatchNormState(spec.proj_hidden)
    return ModelWeights(spec=spec, params=params, bn=bn, seed=int(seed))


def _batched(tile):
    if not isinstance(tile, Tensor):
        tile = Tensor(tile)
    if tile.ndim == 3:
        return T.reshape(tile, (1,) + tile.shape), True
    if tile.ndim == 4:
        return tile, False
    raise DimensionError(f"expected c×h×w or b×c×h×w tile, got {tile.shape}")


def _check_modality(weights, m, x):
    if m not in weights.spec.channels:
        raise DimensionError(f"unknown modality {m!r}; spec has {sorted(weights.spec.channels)}")
    want = weights.spec.channels[m]
    if x.shape[1] != want:
        raise DimensionError(f"modality {m} expects {want} channels, got {x.shape[1]}")


def encode(weights, m, x, mode="eval"):
    """Bottleneck map ``(b, H, h/2^L, w/2^L)`` and the pre-pool activation of every block."""
    _check_modality(weights, m, x)
    p = weights.params
    f = weights.spec.downsample
    if x.shape[2] % f or x.shape[3] % f:
        raise GeometryError(f"tile {x.shape[2]}x{x.shape[3]} not divisible by downsampling factor {f}")
    pad = weights.spec.kernel // 2
    h = x
    skips = []
    for i in range(len(weights.spec.widths)):
        h = T.conv2d(h, p[f"enc.{m}.conv{i}.w"], p[f"enc.{m}.conv{i}.b"], stride=1, pad=pad)
        h = T.batchnorm2d(h, p[f"enc.{m}.bn{i}.gamma"], p[f"enc.{m}.bn{i}.beta"], mode, weights.bn[f"enc.{m}.bn{i}"])
        h = T.relu(h)
        skips.append(h)
        h = T.avg_pool2(h)
    return h, skips


def project(weights, m, feat, mode):
    p = weights.params
    h = T.add_bias(T.matmul(feat, p[f"proj.{m}.fc0.w"]), p[f"proj.{m}.fc0.b"])
    h = T.batchnorm(h, p[f"proj.{m}.bn.gamma"], p[f"proj.{m}.bn.beta"], mode, weights.bn[f"proj.{m}.bn"])
    h = T.relu(h)
    return T.add_bias(T.matmul(h, p[f"proj.{m}.fc1.w"]), p[f"proj.{m}.fc1.b"])


def embed_batch(weights, m, tiles, mode="train"):
    """Pooled features ``(b, H)`` and projections ``(b, P)`` for a batch of tiles."""
    x, _ = _batched(tiles)
    bottom, _ = encode(weights, m, x, mode)
    feat = T.global_avg_pool(bottom)
    return feat, project(weights, m, feat, mode)


def embed(weights, m, tile, mode="eval"):
    """``(h, z)`` for a single ``c×h×w`` tile."""
    x, _ = _batched(tile)
    feat, z = embed_batch(weights, m, x, mode)
    return T.reshape(feat, feat.shape[1:]), T.reshape(z, z.shape[1:])


def segment_logits(weights, tiles, modality="SAR", head=None, mode="eval"):
    """Per-pixel building logits ``(b, 1, h, w)``."""
    x, _ = _batched(tiles)
    head = head or weights.seg_head
    p = weights.params
    feat, skips = encode(weights, modality, x, mode)
    if head == "probe":
        logits = T.conv2d(feat, p["probe.w"], p["probe.b"])
        return T.upsample_nearest(logits, weights.spec.downsample)
    if head != "decoder":
        raise ValueError(f"unknown segmentation head {head!r}")
    pad = weights.spec.kernel // 2
    h = feat
    for i, skip in enumerate(reversed(skips)):
        h = T.concat([T.upsample_nearest(h, 2), skip], axis=1)
        h = T.conv2d(h, p[f"dec.conv{i}.w"], p[f"dec.conv{i}.b"], pad=pad)
        h = T.relu(h)
    return T.conv2d(h, p["dec.head.w"], p["dec.head.b"])


def segment(weights, tile, modality="SAR", head=None, mode="eval"):
    """Building probability map, ``1×h×w`` for one tile or ``b×1×h×w`` for a batch."""
    x, single = _batched(tile)
    probs = T.sigmoid(segment_logits(weights, x, modality, head, mode))
    return T.reshape(probs, probs.shape[1:]) if single else probs


def encoder_param_names(weights, m):
    return weights.names(f"enc.{m}.")


def transplant_encoder(pretrained, m, target, into=None):
    """Copy the modality-``m`` encoder of ``pretrained`` into a copy of ``target``.

    ``into`` names the target branch (defaults to ``m``). Decoder, probe and
    projection parameters of ``target`` are left untouched; the pretrained
    projection head is discarded.
    """
    into = into or m
    if m not in pretrained.spec.channels or into not in target.spec.channels:
        raise SpecMismatchError(f"modality {m!r}/{into!r} missing from one of the specs")
    if pretrained.spec.encoder_fingerprint(m) != target.spec.encoder_fingerprint(into):
        raise SpecMismatchError(
            f"encoder fingerprints differ: {pretrained.spec.encoder_fingerprint(m)} "
            f"!= {target.spec.encoder_fingerprint(into)}"
        )
    out = target.copy()
    for name in encoder_param_names(pretrained, m):
        dest = f"enc.{into}." + name[len(f"enc.{m}.") :]
        out.params[dest] = Tensor(pretrained.params[name].data.copy(), requires_grad=True)
    for name, st in pretrained.bn.items():
        if name.startswith(f"enc.{m}."):
            out.bn[f"enc.{into}." + name[len(f"enc.{m}.") :]] = st.copy()
    return out
