"""Command-line entry point: ``cmcsar {generate,pretrain,finetune,evaluate,sweep,verify}``.

Exit codes: 0 success, 1 failed verification or other package error,
2 configuration/usage error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset, make_grid, save_dataset, synthetic_dataset
from .errors import CMCError, ConfigError, DataError, DivergenceError, SpecMismatchError
from .evaluation import RANDOM, SweepPoint, SweepResult, evaluate_split, run_sweep
from .training import ExperimentConfig, apply_overrides, desk_config, finetune, pretrain

log = logging.getLogger("cmcsar")

EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 1, 2, 3, 4
LOSS_COLUMNS = ["epoch", "split", "loss", "acc", "iou", "lr"]


def _num(x):
    return "" if x is None else f"{x:.6f}"


def write_loss_csv(path, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOSS_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: (_num(r.get(c)) if c in ("loss", "acc", "iou", "lr") else r.get(c)) for c in LOSS_COLUMNS})
    Path(path).write_text(buf.getvalue())


def load_config(path, overrides):
    if path is None:
        cfg = desk_config()
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        cfg = ExperimentConfig.from_dict(raw)
    return apply_overrides(cfg, overrides or [])


def load_data(args, cfg):
    if args.data:
        return load_dataset(args.data)
    d = cfg.data
    return synthetic_dataset(d.n_scenes, d.extent, seed=d.seed, difficulty=d.difficulty, ratio=d.split_ratio)


def prepare_out(path, force=False):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def snapshot(out, cfg):
    (out / "config.json").write_text(cfg.to_json())


def _write_reports(out, result, cfg):
    (out / "report.csv").write_text(result.to_csv())
    (out / "report.json").write_text(result.to_json(cfg.to_dict()))


# --------------------------------------------------------------------- commands


def cmd_generate(args):
    if args.scenes < 2:
        args.parser.error("--scenes must be >= 2 so a train/val split exists")
    out = prepare_out(args.out, args.force)
    ds = synthetic_dataset(args.scenes, args.extent, seed=args.seed, difficulty=args.difficulty)
    save_dataset(ds, out)
    print(f"wrote {args.scenes} scenes to {out}")
    return 0


def cmd_pretrain(args):
    cfg = load_config(args.config, args.set)
    out = prepare_out(args.out, args.force)
    snapshot(out, cfg)
    ds = load_data(args, cfg)
    every = cfg.checkpoint_every

    def on_epoch(epoch, state):
        log.info("pretrain epoch %d loss %.4f lr %.4f", epoch, state.history[-1]["loss"], state.lr)
        if every and (epoch + 1) % every == 0:
            save_checkpoint(out / f"pretrain_e{epoch + 1:04d}.cmct", state.weights, cfg.preset, cfg.hash())

    state = pretrain(cfg, ds, on_epoch=on_epoch)
    save_checkpoint(out / "pretrain.cmct", state.weights, cfg.preset, cfg.hash())
    write_loss_csv(out / "loss.csv", state.history)
    print(f"pretrained {cfg.preset} for {cfg.pretrain.epochs} epochs -> {out / 'pretrain.cmct'}")
    return 0


def cmd_finetune(args):
    overrides = list(args.set or [])
    if args.fraction is not None:
        overrides.append(f"fraction={args.fraction}")
    cfg = load_config(args.config, overrides)
    pre, preset = None, RANDOM
    if args.weights:
        pre, meta = load_checkpoint(args.weights)
        preset = meta.get("preset") or "checkpoint"
        if pre.spec != cfg.encoder:
            raise SpecMismatchError("checkpoint encoder spec differs from config.encoder")
    out = prepare_out(args.out, args.force)
    snapshot(out, cfg)
    ds = load_data(args, cfg)
    val = ds.subset("val")
    d = cfg.data
    grid = make_grid(val[0].extent, d.patch, d.stride)
    rows = []
    every = cfg.checkpoint_every

    def on_epoch(epoch, weights):
        rep = evaluate_split(weights, val, grid, d.resize, cfg.hash(), epoch + 1)
        rows.append({"epoch": epoch, "split": "val", "acc": rep.accuracy, "iou": rep.building_iou})
        log.info("finetune epoch %d val acc %.4f iou %.4f", epoch, rep.accuracy, rep.building_iou)
        if every and (epoch + 1) % every == 0:
            save_checkpoint(out / f"model_e{epoch + 1:04d}.cmct", weights, preset, cfg.hash())
        return {"acc": rep.accuracy, "iou": rep.building_iou}

    state = finetune(cfg, pre, ds, on_epoch=on_epoch)
    history = []
    for h, v in zip(state.history, rows):
        history.append({"epoch": h["epoch"], "split": "train", "loss": h["loss"], "lr": h["lr"]})
        history.append(v)
    write_loss_csv(out / "loss.csv", history)
    save_checkpoint(out / "model.cmct", state.weights, preset, cfg.hash())
    rep = evaluate_split(state.weights, val, grid, d.resize, cfg.hash(), cfg.finetune.epochs)
    result = SweepResult("fraction", [SweepPoint(cfg.fraction, preset, cfg.seed, rep)], [cfg.seed])
    _write_reports(out, result, cfg)
    print(f"finetuned ({preset}, fraction {cfg.fraction}): acc {rep.accuracy:.4f} building IoU {rep.building_iou:.4f}")
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config, args.set)
    weights, meta = load_checkpoint(args.weights)
    out = prepare_out(args.out, args.force)
    snapshot(out, cfg)
    ds = load_data(args, cfg)
    scenes = ds.subset(args.split)
    if not scenes:
        raise DataError(f"split {args.split!r} is empty")
    d = cfg.data
    grid = make_grid(scenes[0].extent, d.patch, d.stride)
    rep = evaluate_split(weights, scenes, grid, d.resize, cfg.hash(), None)
    preset = meta.get("preset") or RANDOM
    result = SweepResult("split", [SweepPoint(args.split, preset, int(meta.get("seed", 0)), rep)], [meta.get("seed", 0)])
    _write_reports(out, result, cfg)
    print(f"{args.split}: acc {rep.accuracy:.4f} building IoU {rep.building_iou:.4f} over {rep.scene_count} scenes")
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config, args.set)
    out = prepare_out(args.out, args.force)
    snapshot(out, cfg)
    ds = load_data(args, cfg)
    values = [float(v) for v in args.values.split(",")] if args.values else []
    if args.axis == "epochs" and not values:
        values = [cfg.finetune.epochs]
    if args.axis == "fraction" and not values:
        values = [0.2, 0.4, 0.6, 0.8, 1.0]
    presets = args.presets.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    result = run_sweep(args.axis, values, presets, seeds, cfg, ds)
    _write_reports(out, result, cfg)
    print(f"sweep over {args.axis}: {len(result.points)} points -> {out / 'report.csv'}")
    return 0


def cmd_verify(args):
    from .verify import format_table, run_all

    if args.config or args.set:
        load_config(args.config, args.set)  # a broken config is reported as such
    results = run_all()
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"FAILED {r.name}: deviation {r.deviation:.3e} > {r.tolerance:.1e} {r.detail}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return 0


# --------------------------------------------------------------------- parser


def _add_run_args(p, weights=False):
    p.add_argument("--config", help="experiment config JSON (default: desk preset)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    p.add_argument("--data", help="dataset directory from `generate` (default: synthesise from config.data)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    if weights:
        p.add_argument("--weights", help="checkpoint (.cmct)")


def build_parser():
    parser = argparse.ArgumentParser(prog="cmcsar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic SAR/EO/GT dataset")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--extent", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    _add_run_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the SAR segmentation model")
    _add_run_args(p, weights=True)
    p.add_argument("--fraction", type=float, help="share of training scenes to use")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a segmentation checkpoint")
    _add_run_args(p)
    p.add_argument("--weights", required=True, help="checkpoint (.cmct)")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="finetune+evaluate over epochs, fractions or presets")
    _add_run_args(p)
    p.add_argument("--axis", choices=("epochs", "fraction", "preset"), required=True)
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--presets", default="Random,SAR,SAR+GT+EO")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the embedded oracle suite")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.parser = parser
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    log.debug("kernel backend: %s", kernels.BACKEND)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SpecMismatchError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CMCError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
