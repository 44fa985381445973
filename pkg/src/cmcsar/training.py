"""Experiment config, learning-rate schedule, SGD and the two training loops."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import augment
from . import tensor as T
from .data import extract, make_grid
from .encoders import EncoderSpec, embed_batch, init_weights, segment_logits, transplant_encoder
from .errors import ConfigError, DataError, DivergenceError, InsufficientNegativesError
from .loss import EmbeddingSet, fullgraph_cmc_loss
from .tensor import Tensor

# preset -> (modalities in view order, augmentations per modality); always 6 views
PRESETS = {
    "SAR": (("SAR",), 6),
    "SAR+EO": (("SAR", "EO"), 3),
    "SAR+GT": (("SAR", "GT"), 3),
    "SAR+GT+EO": (("SAR", "GT", "EO"), 2),
}

NO_DECAY_SUFFIXES = (".b", ".gamma", ".beta")


@dataclass
class DataConfig:
    n_scenes: int = 20
    extent: int = 64
    patch: int = 32
    stride: int = 16
    resize: int = 32
    difficulty: float = 0.5
    seed: int = 0
    split_ratio: float = 0.8


@dataclass
class PretrainConfig:
    base_lr: float = 0.1
    weight_decay: float = 5e-4
    batch: int = 8
    epochs: int = 30
    warmup: int = 10
    loss_reduction: str = "sum"


@dataclass
class FinetuneConfig:
    base_lr: float = 0.0075
    weight_decay: float = 5e-4
    batch: int = 16
    epochs: int = 25
    warmup: int = 1
    head: str = "decoder"


@dataclass
class ExperimentConfig:
    preset: str = "SAR+GT+EO"
    tau: float = 0.1
    seed: int = 0
    fraction: float = 1.0
    checkpoint_every: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        for name, part in (("pretrain", self.pretrain), ("finetune", self.finetune)):
            if not part.base_lr > 0 or not part.weight_decay > 0:
                raise ConfigError(f"{name}: base_lr and weight_decay must be positive")
            if part.epochs < 1 or not 0 <= part.warmup < part.epochs:
                raise ConfigError(f"{name}: need epochs >= 1 and 0 <= warmup < epochs")
            if part.batch < 1:
                raise ConfigError(f"{name}: batch must be >= 1")
        if self.pretrain.batch < 4:
            raise ConfigError("pretrain batch must be >= 4 so projection batchnorm statistics are defined")
        if self.pretrain.loss_reduction not in ("sum", "mean"):
            raise ConfigError("pretrain.loss_reduction must be 'sum' or 'mean'")
        if self.finetune.head not in ("decoder", "probe"):
            raise ConfigError("finetune.head must be 'decoder' or 'probe'")
        d = self.data
        if d.patch > d.extent or d.stride < 1:
            raise ConfigError("data: need patch <= extent and stride >= 1")
        if d.resize % self.encoder.downsample:
            raise ConfigError(f"data.resize must be divisible by {self.encoder.downsample}")
        if not 0 < d.split_ratio < 1:
            raise ConfigError("data.split_ratio must lie in (0, 1)")

    @property
    def modalities(self):
        return PRESETS[self.preset][0]

    @property
    def n_augmentations(self):
        return PRESETS[self.preset][1]

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(dict(d))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            parts = {
                "data": DataConfig(**d.pop("data", {})),
                "pretrain": PretrainConfig(**d.pop("pretrain", {})),
                "finetune": FinetuneConfig(**d.pop("finetune", {})),
                "encoder": EncoderSpec.from_dict(d.pop("encoder", {})),
            }
            return cls(**d, **parts)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides):
        return apply_overrides(self, [f"{k}={json.dumps(v)}" for k, v in overrides.items()])


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config, assignments):
    """Return a new config with dotted ``key=value`` assignments applied (values parsed as JSON)."""
    d = config.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return ExperimentConfig.from_dict(d)


def desk_config(**overrides):
    """Desk-scale defaults used by the acceptance experiments."""
    cfg = ExperimentConfig(
        pretrain=PretrainConfig(base_lr=0.2, batch=8, epochs=30, warmup=3, loss_reduction="mean"),
        finetune=FinetuneConfig(base_lr=0.2, batch=16, epochs=25, warmup=1),
    )
    return cfg.replace(**overrides) if overrides else cfg


def full_scale_config():
    """Full-scale hyperparameters: 448-pixel tiles, wide encoders, 500 pretraining epochs.

    Far too slow for a desk run; kept so the full-scale geometry stays tested.
    """
    return ExperimentConfig(
        preset="SAR+GT+EO",
        tau=0.1,
        data=DataConfig(extent=900, patch=300, stride=150, resize=448),
        pretrain=PretrainConfig(base_lr=0.1, weight_decay=5e-4, batch=126, epochs=500, warmup=10),
        finetune=FinetuneConfig(base_lr=0.0075, weight_decay=5e-4, batch=72, epochs=25, warmup=1),
        encoder=EncoderSpec(widths=(64, 128, 256, 512, 1024, 2048), proj_hidden=2048, proj_dim=2048),
    )


# --------------------------------------------------------------------- optimisation


def lr_schedule(epoch, base, warmup, total):
    """Linear warm-up to ``base`` over ``warmup`` epochs, then half-cosine decay."""
    if not 0 <= warmup < total:
        raise ConfigError(f"need 0 <= warmup < total epochs, got warmup={warmup}, total={total}")
    if not 0 <= epoch < total:
        raise ConfigError(f"epoch {epoch} outside [0, {total})")
    if epoch < warmup:
        return base * ((epoch + 1) / warmup)
    return 0.5 * base * (1.0 + math.cos(math.pi * (epoch - warmup) / (total - warmup)))


def decays(name):
    return not name.endswith(NO_DECAY_SUFFIXES)


def sgd_step(weights, grads, lr, weight_decay):
    """``w <- w - lr * (g + wd * w)``; biases and batchnorm affine params skip the decay term."""
    for name, g in grads.items():
        if g is None:
            raise DivergenceError(f"missing gradient for {name}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise DivergenceError(f"non-finite gradient in {name} ({bad} entries) at step {weights.step}")
    for name, g in grads.items():
        p = weights.params[name]
        if lr == 0:
            continue
        step = g + weight_decay * p.data if decays(name) else g
        p.data = (p.data - np.float32(lr) * step).astype(np.float32)
    weights.step += 1
    return weights


# --------------------------------------------------------------------- pretraining


@dataclass
class TrainState:
    weights: object
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    history: list = field(default_factory=list)


def _patches(scenes, cfg, modalities):
    grid = make_grid(scenes[0].extent, cfg.data.patch, cfg.data.stride)
    out = []
    for s in scenes:
        out.extend(extract(s, grid, cfg.data.resize, modalities))
    return out


def build_views(patch_sets, modalities, n_aug, chain, epoch, indices):
    """Per-modality arrays ``(B*N, c, h, w)``, instance-major, from ``N`` joint augmentation draws."""
    per_mod = {m: [] for m in modalities}
    for i in indices:
        tiles = {m: patch_sets[i].tiles[m] for m in modalities}
        for n in range(n_aug):
            views = augment.apply(chain, tiles, key=(epoch, int(i), n))
            for m in modalities:
                per_mod[m].append(views[m])
    return {m: np.stack(v) for m, v in per_mod.items()}


def contrastive_step(weights, views, modalities, n_aug, tau, reduction="sum"):
    """Forward the views through their branches and return the loss tensor."""
    zs = []
    for m in modalities:
        x = views[m]
        _, z = embed_batch(weights, m, Tensor(x), "train")
        b = x.shape[0] // n_aug
        zs.append(T.reshape(z, (b, n_aug, z.shape[1])))
    z = T.concat(zs, axis=1) if len(zs) > 1 else zs[0]
    labels = [mi for mi in range(len(modalities)) for _ in range(n_aug)]
    return fullgraph_cmc_loss(EmbeddingSet(z, labels, tau), reduction)


def pretrain(config, dataset, on_epoch=None):
    """Full-graph contrastive pretraining of the preset's encoder branches.

    Returns the final :class:`TrainState` (weights plus per-epoch loss history).
    """
    modalities, n_aug = config.modalities, config.n_augmentations
    pc = config.pretrain
    if pc.batch < 2:
        raise InsufficientNegativesError("pretraining needs batch >= 2")
    patches = _patches(dataset.subset("train"), config, modalities)
    if len(patches) < pc.batch:
        raise DataError(f"{len(patches)} training patches cannot fill a batch of {pc.batch}")
    weights = init_weights(config.encoder, config.seed)
    trainable = [n for m in modalities for n in weights.params if n.startswith((f"enc.{m}.", f"proj.{m}."))]
    chain = augment.pretrain_chain(config.data.resize, seed=config.seed)
    state = TrainState(weights)
    steps = len(patches) // pc.batch
    for epoch in range(pc.epochs):
        lr = lr_schedule(epoch, pc.base_lr, pc.warmup, pc.epochs)
        state.epoch, state.lr = epoch, lr
        order = np.random.default_rng([config.seed, epoch, 1]).permutation(len(patches))
        losses = []
        for s in range(steps):
            idx = order[s * pc.batch : (s + 1) * pc.batch]
            views = build_views(patches, modalities, n_aug, chain, epoch, idx)
            weights.zero_grad()
            loss = contrastive_step(weights, views, modalities, n_aug, config.tau, pc.loss_reduction)
            loss.backward()
            sgd_step(weights, {n: weights.params[n].grad for n in trainable}, lr, pc.weight_decay)
            losses.append(loss.item())
            state.step += 1
        entry = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "lr": lr}
        state.history.append(entry)
        if on_epoch is not None:
            on_epoch(epoch, state)
    return state


# --------------------------------------------------------------------- finetuning


def finetune_subset(scene_ids, fraction, seed):
    """Deterministic ``ceil(fraction * n)`` scenes drawn by ``seed``."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    ids = list(scene_ids)
    k = math.ceil(round(fraction * len(ids), 9))
    if k < 1:
        raise DataError("empty training subset")
    order = np.random.default_rng([seed, 2]).permutation(len(ids))
    return [ids[i] for i in sorted(order[:k])]


def finetune(config, pretrained, dataset, fraction=None, on_epoch=None):
    """Train the SAR segmentation model with per-pixel BCE.

    ``pretrained`` (a :class:`ModelWeights` or ``None``) supplies the SAR
    encoder; the decoder always starts from the seed's own initialisation so
    pretrained and random runs differ only in the encoder. ``on_epoch(epoch,
    weights)`` may return a dict of metrics that is merged into the history.
    """
    fraction = config.fraction if fraction is None else fraction
    fc = config.finetune
    weights = init_weights(config.encoder, config.seed)
    if pretrained is not None:
        weights = transplant_encoder(pretrained, "SAR", weights)
    weights.seg_head = fc.head
    ids = finetune_subset(dataset.manifest.train, fraction, config.seed)
    patches = _patches([dataset.get(i) for i in ids], config, ("SAR", "GT"))
    if not patches:
        raise DataError("empty training subset")
    if fc.head == "probe":
        trainable = weights.names("probe.")
    else:
        trainable = weights.names("enc.SAR.") + weights.names("dec.")
    chain = augment.finetune_chain(config.data.resize, seed=config.seed)
    state = TrainState(weights)
    bs = min(fc.batch, len(patches))
    # a frozen encoder keeps its running statistics
    mode = "eval" if fc.head == "probe" else "train"
    for epoch in range(fc.epochs):
        lr = lr_schedule(epoch, fc.base_lr, fc.warmup, fc.epochs)
        state.epoch, state.lr = epoch, lr
        order = np.random.default_rng([config.seed, epoch, 3]).permutation(len(patches))
        losses = []
        for s in range(0, len(order), bs):
            idx = order[s : s + bs]
            xs, ys = [], []
            for i in idx:
                v = augment.apply(chain, patches[i].tiles, key=(epoch, int(i)))
                xs.append(v["SAR"])
                ys.append(v["GT"])
            weights.zero_grad()
            logits = segment_logits(weights, Tensor(np.stack(xs)), head=fc.head, mode=mode)
            loss = T.bce_with_logits(logits, np.stack(ys))
            loss.backward()
            sgd_step(weights, {n: weights.params[n].grad for n in trainable}, lr, fc.weight_decay)
            losses.append(loss.item())
            state.step += 1
        entry = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "lr": lr}
        if on_epoch is not None:
            entry.update(on_epoch(epoch, weights) or {})
        state.history.append(entry)
    return state
