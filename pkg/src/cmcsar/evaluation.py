"""Scene-level segmentation metrics, split evaluation and experiment sweeps.

Predictions are made per patch, merged back to the full scene by averaging
probabilities, and only then thresholded (building iff probability > 0.5).
Split-level accuracy and IoU come from confusion counts summed over scenes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import augment
from .data import extract, make_grid, merge
from .encoders import segment
from .errors import DataError, DimensionError, DomainError
from .tensor import Tensor
from .training import finetune, pretrain

THRESHOLD = 0.5


def binarize(prob_map, threshold=THRESHOLD):
    p = np.asarray(prob_map)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise DomainError("probabilities must lie in [0, 1]")
    return p > threshold


def confusion(pred_mask, gt_mask):
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.dtype != bool and not np.isin(a, (0, 1)).all():
            raise DomainError(f"{name} mask is not binary")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, fn, tn


def _from_counts(tp, fp, fn, tn):
    total = tp + fp + fn + tn
    union = tp + fp + fn
    acc = (tp + tn) / total if total else float("nan")
    iou = tp / union if union else None
    return acc, iou


def metrics(pred_mask, gt_mask):
    """``(accuracy, iou)``; IoU is ``None`` when both masks are empty."""
    return _from_counts(*confusion(pred_mask, gt_mask))


@dataclass
class MetricsReport:
    accuracy: float
    iou: float | None
    tp: int
    fp: int
    fn: int
    tn: int
    scene_count: int
    per_scene: list = field(default_factory=list)
    threshold: float = THRESHOLD
    config_hash: str = ""
    epoch: int | None = None

    @property
    def iou_defined(self):
        return self.iou is not None

    @property
    def building_iou(self):
        """IoU with the undefined case (no building anywhere) reported as 0."""
        return 0.0 if self.iou is None else self.iou

    def to_dict(self):
        d = asdict(self)
        d["iou_defined"] = self.iou_defined
        return d


def predict_scene(weights, scene, grid, resize_to=None, head=None):
    """Merged building probability map ``1×h×w`` for one scene."""
    patches = extract(scene, grid, resize_to, ("SAR",))
    x = np.stack([p.tiles["SAR"] for p in patches])
    probs = segment(weights, Tensor(x), head=head).data
    s = grid.size
    preds = []
    for p, pr in zip(patches, probs):
        if pr.shape[-1] != s:
            pr = augment._resize({"p": pr}, s, s, set())["p"]
            pr = np.clip(pr, 0.0, 1.0)
        preds.append((p.offset, pr))
    return merge(preds, grid, scene.extent)


def evaluate_predictions(prob_maps, scenes, config_hash="", epoch=None):
    """Aggregate metrics from already merged probability maps (one per scene)."""
    if not scenes:
        raise DataError("cannot evaluate an empty split")
    per_scene = []
    tot = np.zeros(4, dtype=np.int64)
    for scene, prob in zip(scenes, prob_maps):
        counts = confusion(binarize(prob), scene.gt > 0.5)
        tot += counts
        acc, iou = _from_counts(*counts)
        per_scene.append({"scene": scene.scene_id, "accuracy": acc, "iou": iou, "counts": list(counts)})
    acc, iou = _from_counts(*(int(c) for c in tot))
    return MetricsReport(acc, iou, *(int(c) for c in tot), len(scenes), per_scene, THRESHOLD, config_hash, epoch)


def evaluate_split(weights, scenes, grid=None, resize_to=None, config_hash="", epoch=None, head=None):
    """Patch-wise inference, merge, threshold, and global confusion counts over ``scenes``."""
    if not scenes:
        raise DataError("cannot evaluate an empty split")
    if grid is None:
        grid = make_grid(scenes[0].extent, 32, 16)
    maps = [predict_scene(weights, s, grid, resize_to, head) for s in scenes]
    return evaluate_predictions(maps, scenes, config_hash, epoch)


# --------------------------------------------------------------------- sweeps

RANDOM = "Random"
FRACTION_POINTS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class SweepPoint:
    axis_value: float
    preset: str
    seed: int
    report: MetricsReport
    comparable: bool = True


@dataclass
class SweepResult:
    axis: str
    points: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    def get(self, axis_value, preset, seed):
        for p in self.points:
            if p.axis_value == axis_value and p.preset == preset and p.seed == seed:
                return p
        raise KeyError((axis_value, preset, seed))

    def iou(self, axis_value, preset, seed):
        return self.get(axis_value, preset, seed).report.building_iou

    def rows(self):
        for p in self.points:
            yield {
                "axis": self.axis,
                "axis_value": p.axis_value,
                "preset": p.preset,
                "seed": p.seed,
                "acc": p.report.accuracy,
                "building_iou": p.report.building_iou,
                "scenes": p.report.scene_count,
                "epoch": p.report.epoch,
                "comparable": p.comparable,
            }

    def to_csv(self):
        buf = io.StringIO()
        cols = ["axis", "axis_value", "preset", "seed", "acc", "building_iou", "scenes", "epoch"]
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_json(self, config=None):
        doc = {
            "axis": self.axis,
            "seeds": list(self.seeds),
            "config": config,
            "points": [
                {**r, "report": p.report.to_dict()} for r, p in zip(self.rows(), self.points)
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _fmt(x):
    return f"{x:.6f}"


class PretrainCache:
    """Memoises pretraining runs by ``(preset, seed, config hash)``."""

    def __init__(self):
        self._store = {}

    def get(self, config, dataset):
        if config.preset == RANDOM:
            return None
        key = (config.preset, config.seed, config.hash())
        if key not in self._store:
            self._store[key] = pretrain(config, dataset).weights
        return self._store[key]


def uses_gt(preset):
    return "GT" in preset.split("+")


def _point_config(base, preset, seed):
    cfg = base.replace(seed=seed)
    if preset != RANDOM:
        cfg = cfg.replace(preset=preset)
    return cfg


def run_sweep(axis, values, presets, seeds, base_config, dataset, cache=None):
    """Finetune and evaluate every (value, preset, seed) combination.

    ``axis`` is ``"epochs"`` (one finetuning run per preset/seed, evaluated
    after each requested epoch), ``"fraction"`` (one run per fraction) or
    ``"preset"`` (``values`` ignored; one point per preset). ``"Random"`` as a
    preset means no pretraining. In fraction sweeps, presets that saw the
    ground-truth mask during pretraining are kept but flagged not comparable.
    """
    if not presets or not seeds:
        raise ValueError("need at least one preset and one seed")
    cache = cache or PretrainCache()
    val = dataset.subset("val")
    d = base_config.data
    grid = make_grid(val[0].extent, d.patch, d.stride)
    result = SweepResult(axis=axis, seeds=list(seeds))
    for seed in seeds:
        for preset in presets:
            cfg = _point_config(base_config, preset, seed)
            pre = cache.get(cfg, dataset) if preset != RANDOM else None
            if axis == "epochs":
                wanted = {int(v) for v in values}
                if max(wanted) > cfg.finetune.epochs:
                    raise ValueError(f"epoch point {max(wanted)} beyond finetune.epochs={cfg.finetune.epochs}")
                reports = {}

                def on_epoch(epoch, weights, _reports=reports, _cfg=cfg):
                    if epoch + 1 in wanted:
                        _reports[epoch + 1] = evaluate_split(
                            weights, val, grid, d.resize, _cfg.hash(), epoch + 1
                        )
                    return None

                finetune(cfg, pre, dataset, on_epoch=on_epoch)
                for v in sorted(wanted):
                    result.points.append(SweepPoint(v, preset, seed, reports[v]))
            elif axis == "fraction":
                for v in values:
                    st = finetune(cfg, pre, dataset, fraction=float(v))
                    rep = evaluate_split(st.weights, val, grid, d.resize, cfg.hash(), cfg.finetune.epochs)
                    result.points.append(SweepPoint(float(v), preset, seed, rep, comparable=not uses_gt(preset)))
            elif axis == "preset":
                st = finetune(cfg, pre, dataset)
                rep = evaluate_split(st.weights, val, grid, d.resize, cfg.hash(), cfg.finetune.epochs)
                result.points.append(SweepPoint(0.0, preset, seed, rep))
            else:
                raise ValueError(f"unknown sweep axis {axis!r}")
    return result


def iou_curve(config, pretrained, dataset):
    """Validation IoU after every finetuning epoch (index ``e`` = after ``e+1`` epochs)."""
    val = dataset.subset("val")
    d = config.data
    grid = make_grid(val[0].extent, d.patch, d.stride)
    curve = []

    def on_epoch(epoch, weights):
        rep = evaluate_split(weights, val, grid, d.resize, config.hash(), epoch + 1)
        curve.append(rep.building_iou)
        return {"acc": rep.accuracy, "iou": rep.building_iou}

    state = finetune(config, pretrained, dataset, on_epoch=on_epoch)
    return curve, state


def epochs_to_reach(curve, target):
    """1-based epoch at which ``curve`` first reaches ``target`` (``None`` if never)."""
    for i, v in enumerate(curve):
        if v >= target:
            return i + 1
    return None
