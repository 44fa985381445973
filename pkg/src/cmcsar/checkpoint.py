"""Model checkpoints: a CMCT container of weights plus a JSON sidecar.

The sidecar (``<name>.json`` next to ``<name>.cmct``) records the encoder
spec, seed, optimiser step, preset, config hash and a content hash of the
arrays, which is checked on load.
"""

from __future__ import annotations

import json
from pathlib import Path

from .encoders import EncoderSpec, init_weights
from .errors import ContainerError, SpecMismatchError
from .io import load_container, save_container
from .tensor import Tensor


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def save_checkpoint(path, weights, preset=None, config_hash=""):
    path = Path(path)
    save_container(path, weights.state_arrays())
    meta = {
        "spec": weights.spec.to_dict(),
        "seed": weights.seed,
        "step": weights.step,
        "preset": preset,
        "config_hash": config_hash,
        "seg_head": weights.seg_head,
        "content_hash": weights.content_hash(),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def load_checkpoint(path):
    """``(weights, meta)`` from a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"cannot read checkpoint sidecar for {path}: {exc}") from None
    arrays = load_container(path)
    spec = EncoderSpec.from_dict(meta["spec"])
    weights = init_weights(spec, meta["seed"])
    expected = set(weights.state_arrays())
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))[:3]
        extra = sorted(set(arrays) - expected)[:3]
        raise SpecMismatchError(f"checkpoint entries do not match spec (missing {missing}, unexpected {extra})")
    for name, p in weights.params.items():
        if arrays[name].shape != p.shape:
            raise SpecMismatchError(f"{name}: checkpoint shape {arrays[name].shape} vs spec {p.shape}")
        weights.params[name] = Tensor(arrays[name], requires_grad=True)
    for name, st in weights.bn.items():
        st.running_mean = arrays[f"{name}.running_mean"]
        st.running_var = arrays[f"{name}.running_var"]
    weights.step = int(meta.get("step", 0))
    weights.seg_head = meta.get("seg_head", "decoder")
    if meta.get("content_hash") and weights.content_hash() != meta["content_hash"]:
        raise ContainerError(f"{path}: content hash does not match sidecar")
    return weights, meta
