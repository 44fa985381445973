"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line.

Criteria 8-10 share one set of desk-scale experiments (5 seeds) computed
once per module; expect roughly 20 minutes on a single core.
"""

import filecmp
import math
import os
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

from cmcsar import tensor as T
from cmcsar.data import SceneBundle, extract, make_grid, merge, synthetic_dataset
from cmcsar.evaluation import epochs_to_reach, iou_curve
from cmcsar.gradcheck import check
from cmcsar.loss import EmbeddingSet, fullgraph_cmc_loss, loss_oracle, pairwise_loss
from cmcsar.tensor import BatchNormState, Tensor
from cmcsar.training import desk_config, finetune, lr_schedule, pretrain
from cmcsar.evaluation import evaluate_split

SEEDS = (0, 1, 2, 3, 4)
BUDGET_S = 30 * 60


def embedding_set(rng, b_max=4, m_max=3, n_max=2, d_max=8):
    b = int(rng.integers(2, b_max + 1))
    m = int(rng.integers(1, m_max + 1))
    n = int(rng.integers(1, n_max + 1))
    if m * n < 2:
        n = 2
    d = int(rng.integers(1, d_max + 1))
    labels = [mi for mi in range(m) for _ in range(n)]
    z = rng.standard_normal((b, m * n, d))
    return EmbeddingSet(Tensor(z, dtype=np.float64), labels, float(rng.uniform(0.05, 2.0)))


def test_criterion_01_loss_oracle(report_criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        e = embedding_set(rng)
        worst = max(worst, abs(fullgraph_cmc_loss(e).item() - loss_oracle(e)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 10
    report_criterion(1, ok, f"200 instances, max |loss - oracle| = {worst:.2e} (tol 1e-6), {elapsed:.2f}s (< 10s)")
    assert ok


def test_criterion_02_hand_case(report_criterion):
    z = np.array([[[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]])
    got = fullgraph_cmc_loss(EmbeddingSet(Tensor(z, dtype=np.float64), [0, 0], 1.0)).item()
    want = 4 * math.log(1 + math.exp(-1))
    ok = abs(got - want) < 1e-5 and abs(got - 1.25304) < 1e-5
    report_criterion(2, ok, f"L = {got:.6f}, 4*log(1+e^-1) = {want:.6f} (tol 1e-5)")
    assert ok


def test_criterion_03_degenerate_cases(report_criterion):
    rng = np.random.default_rng(3)
    single = [pairwise_loss(Tensor(rng.standard_normal((2, 5)), dtype=np.float64), [1, 0], t).item() for t in (0.1, 1.0)]
    worst = 0.0
    for n in range(1, 7):
        z = np.tile(rng.standard_normal((1, 4)), (2 * n, 1))
        got = pairwise_loss(Tensor(z, dtype=np.float64), [i ^ 1 for i in range(2 * n)], 0.7).item()
        worst = max(worst, abs(got - 2 * n * math.log(2 * n - 1)))
    ok = all(v == 0.0 for v in single) and worst < 1e-6
    report_criterion(3, ok, f"N=1 losses {single} (exactly 0); uniform max dev {worst:.2e} (tol 1e-6)")
    assert ok


def _kinkless(rng, shape):
    x = rng.uniform(-2, 2, shape)
    x[np.abs(x) < 0.01] = 0.5
    return x


def gradient_cases(rng):
    """(name, fn, args) for every differentiable op plus the end-to-end losses."""
    a = lambda *s: _kinkless(rng, s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5)))
    r, c = shape
    e = embedding_set(rng, d_max=6)
    partner = [i ^ 1 for i in range(4)]
    img = (2, int(rng.integers(1, 3)), 4, 4)
    target = (rng.random(shape) > 0.5).astype(float)
    return [
        ("add", T.add, [a(*shape), a(*shape)]),
        ("sub", T.sub, [a(*shape), a(*shape)]),
        ("mul", T.mul, [a(*shape), a(*shape)]),
        ("div", T.div, [a(*shape), pos(*shape)]),
        ("scale", lambda x: T.scale(x, 1.3), [a(*shape)]),
        ("neg", T.neg, [a(*shape)]),
        ("exp", T.exp, [a(*shape)]),
        ("log", T.log, [pos(*shape)]),
        ("sqrt", T.sqrt, [pos(*shape)]),
        ("relu", T.relu, [a(*shape)]),
        ("sigmoid", T.sigmoid, [a(*shape)]),
        ("matmul", T.matmul, [a(r, c), a(c, 3)]),
        ("add_bias", T.add_bias, [a(*shape), a(c)]),
        ("sum", lambda x: T.tsum(x, axis=1), [a(*shape)]),
        ("mean", lambda x: T.mean(x, axis=0), [a(*shape)]),
        ("logsumexp", lambda x: T.logsumexp(x, axis=1), [a(*shape)]),
        ("reshape", lambda x: T.reshape(x, (c, r)), [a(*shape)]),
        ("transpose", lambda x: T.transpose(x, (1, 0)), [a(*shape)]),
        ("concat", lambda x, y: T.concat([x, y], axis=1), [a(*shape), a(r, 2)]),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, pad=1), [a(*img), a(3, img[1], 3, 3), a(3)]),
        ("conv2d_stride2", lambda x, w: T.conv2d(x, w, stride=2), [a(2, 1, 5, 5), a(2, 1, 3, 3)]),
        ("avg_pool2", T.avg_pool2, [a(*img)]),
        ("upsample_nearest", lambda x: T.upsample_nearest(x, 2), [a(*img)]),
        ("global_avg_pool", T.global_avg_pool, [a(*img)]),
        ("batchnorm", lambda x, g, b: T.batchnorm(x, g, b, "train", BatchNormState(3)), [a(4, 3), pos(3), a(3)]),
        ("batchnorm2d", lambda x, g, b: T.batchnorm2d(x, g, b, "train", BatchNormState(img[1])), [a(*img), pos(img[1]), a(img[1])]),
        ("l2_normalize", lambda x: T.l2_normalize(x, axis=1), [a(*shape)]),
        ("bce_with_logits", lambda x: T.bce_with_logits(x, target), [a(*shape)]),
        ("pairwise_loss", lambda z: pairwise_loss(z, partner, 0.5), [a(4, 3)]),
        ("fullgraph_cmc_loss", lambda z: fullgraph_cmc_loss(EmbeddingSet(z, e.modality_of_view, e.temperature)), [e.z.data]),
    ]


def test_criterion_04_gradient_suite(report_criterion):
    start = time.perf_counter()
    worst, where, count = 0.0, "", 0
    for seed in range(4):
        for name, fn, args in gradient_cases(np.random.default_rng([4, seed])):
            err = check(fn, args)
            count += 1
            if err > worst:
                worst, where = err, name
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and count >= 100 and elapsed < 60
    report_criterion(4, ok, f"{count} instances, max rel. error {worst:.2e} ({where}; tol 1e-3), {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_05_invariances(report_criterion):
    rng = np.random.default_rng(5)
    dev = {"batch permutation": 0.0, "view relabeling": 0.0, "positive scaling": 0.0}
    for _ in range(50):
        e = embedding_set(rng)
        z, labels, tau = e.z.data, e.modality_of_view, e.temperature
        base = fullgraph_cmc_loss(e).item()

        def loss(zz, lab=labels):
            return fullgraph_cmc_loss(EmbeddingSet(Tensor(zz, dtype=np.float64), lab, tau)).item()

        pv = rng.permutation(z.shape[1])
        dev["batch permutation"] = max(dev["batch permutation"], abs(loss(z[rng.permutation(z.shape[0])]) - base))
        dev["view relabeling"] = max(dev["view relabeling"], abs(loss(z[:, pv], [labels[i] for i in pv]) - base))
        scale = rng.uniform(0.01, 100, z.shape[:2] + (1,))
        dev["positive scaling"] = max(dev["positive scaling"], abs(loss(z * scale) - base))
    ok = all(v < 1e-6 for v in dev.values())
    report_criterion(5, ok, "50 draws each; max dev " + ", ".join(f"{k} {v:.1e}" for k, v in dev.items()) + " (tol 1e-6)")
    assert ok


def test_criterion_06_geometry(report_criterion):
    full, desk = make_grid(900, 300, 150), make_grid(64, 32, 16)
    field_ = np.random.default_rng(6).random((1, 64, 64)).astype(np.float32)
    scene = SceneBundle("g", np.repeat(field_, 3, 0), np.repeat(field_, 3, 0), (field_ > 0.5).astype(np.float32))
    patches = extract(scene, desk, resize_to=32, modalities=("SAR",))
    merged = merge([(p.offset, p.tiles["SAR"][:1]) for p in patches], desk)
    exact = np.array_equal(merged, field_)
    rng = np.random.default_rng(7)
    rand = merge([(o, rng.random((1, 32, 32))) for o in desk.offsets], desk)
    bounded = rand.min() >= 0 and rand.max() <= 1
    ok = len(full) == 25 and len(desk) == 9 and exact and bounded
    report_criterion(6, ok, f"900/300/150 -> {len(full)} patches, 64/32/16 -> {len(desk)}, roundtrip exact={exact}, bounded={bounded}")
    assert ok


def test_criterion_07_schedule(report_criterion):
    base, w, total = 0.1, 10, 500
    boundary = lr_schedule(w - 1, base, w, total) == base
    after = [lr_schedule(e, base, w, total) for e in range(w, total)]
    monotone = all(b <= a for a, b in zip(after, after[1:]))
    spot = 0.0
    for e in (0, 4, 9, 10, 50, 254, 255, 499):
        want = base * (e + 1) / w if e < w else 0.5 * base * (1 + math.cos(math.pi * (e - w) / (total - w)))
        spot = max(spot, abs(lr_schedule(e, base, w, total) - want))
    ok = boundary and monotone and spot < 1e-9
    report_criterion(7, ok, f"lr(W-1)=base {boundary}, non-increasing after warm-up {monotone}, spot max dev {spot:.1e} (tol 1e-9)")
    assert ok


# --------------------------------------------------------------------- desk-scale experiments


def _seed_config(seed):
    return desk_config(seed=seed).replace(**{"data.seed": seed})


def _dataset(cfg):
    d = cfg.data
    return synthetic_dataset(d.n_scenes, d.extent, seed=d.seed, difficulty=d.difficulty, ratio=d.split_ratio)


@pytest.fixture(scope="module")
def desk_runs():
    """Per seed: IoU curves for Random / SAR / SAR+GT+EO, plus the fraction-0.2 runs."""
    runs = {}
    start = time.process_time()
    wall = time.perf_counter()
    for seed in SEEDS:
        cfg = _seed_config(seed)
        ds = _dataset(cfg)
        curves = {"Random": iou_curve(cfg, None, ds)[0]}
        for preset in ("SAR", "SAR+GT+EO"):
            pre = pretrain(cfg.replace(preset=preset), ds).weights
            curves[preset] = iou_curve(cfg, pre, ds)[0]
        runs[seed] = {"cfg": cfg, "ds": ds, "curves": curves}
    ordering_cpu = time.process_time() - start
    ordering_wall = time.perf_counter() - wall
    for seed in SEEDS:
        cfg, ds = runs[seed]["cfg"], runs[seed]["ds"]
        val = ds.subset("val")
        grid = make_grid(val[0].extent, cfg.data.patch, cfg.data.stride)
        pre = pretrain(cfg.replace(preset="SAR+EO"), ds).weights
        small = {}
        for name, weights in (("SAR+EO", pre), ("Random", None)):
            st = finetune(cfg, weights, ds, fraction=0.2)
            small[name] = evaluate_split(st.weights, val, grid, cfg.data.resize).building_iou
        runs[seed]["fraction_0.2"] = small
    return {"seeds": runs, "ordering_cpu": ordering_cpu, "ordering_wall": ordering_wall}


def test_criterion_08_table_ordering(desk_runs, report_criterion):
    rows = []
    wins_sar = wins_full = 0
    for seed, r in desk_runs["seeds"].items():
        final = {k: v[-1] for k, v in r["curves"].items()}
        wins_sar += final["SAR"] - final["Random"] > 0
        wins_full += final["SAR+GT+EO"] - final["SAR"] > 0
        rows.append(f"s{seed}: {final['Random']:.3f}/{final['SAR']:.3f}/{final['SAR+GT+EO']:.3f}")
    cpu = desk_runs["ordering_cpu"]
    ok = wins_sar >= 4 and wins_full >= 4 and cpu < BUDGET_S
    report_criterion(
        8, ok,
        f"Random<SAR in {wins_sar}/5, SAR<SAR+GT+EO in {wins_full}/5 (need 4/5); "
        f"IoU Random/SAR/SAR+GT+EO {'; '.join(rows)}; {cpu / 60:.1f} CPU-min (< 30)",
    )
    assert ok


def test_criterion_09_sample_efficiency(desk_runs, report_criterion):
    strong = floor = 0
    rows = []
    for seed, r in desk_runs["seeds"].items():
        se, rnd = r["fraction_0.2"]["SAR+EO"], r["fraction_0.2"]["Random"]
        full = r["curves"]["Random"][-1]
        strong += se > full
        floor += se > rnd
        rows.append(f"s{seed}: {se:.3f} vs {full:.3f} / {rnd:.3f}")
    strong_ok, floor_ok = strong >= 3, floor == 5
    detail = (
        f"SAR+EO@0.2 > Random@1.0 in {strong}/5 (need 3/5: {'met' if strong_ok else 'not met'}); "
        f"floor SAR+EO@0.2 > Random@0.2 in {floor}/5 (need 5/5: {'met' if floor_ok else 'not met'}); "
        f"SAR+EO@0.2 vs Random@1.0 / Random@0.2 {'; '.join(rows)}"
    )
    report_criterion(9, strong_ok or floor_ok, detail)
    assert strong_ok or floor_ok


def test_criterion_10_convergence_speed(desk_runs, report_criterion):
    rnd_e, full_e = [], []
    for r in desk_runs["seeds"].values():
        target = r["curves"]["Random"][-1]
        horizon = len(r["curves"]["Random"]) + 1
        rnd_e.append(epochs_to_reach(r["curves"]["Random"], target) or horizon)
        full_e.append(epochs_to_reach(r["curves"]["SAR+GT+EO"], target) or horizon)
    m_full, m_rnd = statistics.median(full_e), statistics.median(rnd_e)
    ok = m_full < m_rnd
    report_criterion(10, ok, f"median epochs to reach Random's final IoU: SAR+GT+EO {m_full} vs Random {m_rnd} (per seed {full_e} vs {rnd_e})")
    assert ok


# --------------------------------------------------------------------- reproducibility


def _cli(*args, cwd):
    env = dict(os.environ, CMC_THREADS="1")
    cmd = [sys.executable, "-m", "cmcsar.cli", *args]
    return subprocess.run(cmd, cwd=cwd, env=env, capture_output=True, text=True, check=True)


def _pipeline(root):
    fast = ["--set", "pretrain.epochs=2", "--set", "pretrain.warmup=1", "--set", "finetune.epochs=2", "--set", "finetune.warmup=0"]
    _cli("generate", "--scenes", "6", "--extent", "64", "--seed", "9", "--out", "ds", cwd=root)
    _cli("pretrain", "--data", "ds", *fast, "--set", "preset=SAR+EO", "--out", "pre", cwd=root)
    _cli("finetune", "--data", "ds", "--config", "pre/config.json", "--weights", "pre/pretrain.cmct", "--fraction", "0.5", "--out", "ft", cwd=root)
    _cli("evaluate", "--data", "ds", "--config", "ft/config.json", "--weights", "ft/model.cmct", "--split", "val", "--out", "ev", cwd=root)
    _cli("sweep", "--data", "ds", "--config", "pre/config.json", "--axis", "epochs", "--values", "1,2", "--presets", "Random,SAR", "--out", "sw", cwd=root)


def _tree_diff(a, b):
    cmp = filecmp.dircmp(a, b)
    bad = list(cmp.left_only) + list(cmp.right_only)
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    bad += mismatch + errors
    for sub in cmp.common_dirs:
        bad += [f"{sub}/{x}" for x in _tree_diff(a / sub, b / sub)]
    return bad


def test_criterion_11_reproducibility(tmp_path, report_criterion):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    diff = _tree_diff(tmp_path / "a", tmp_path / "b")
    n_files = sum(1 for p in (tmp_path / "a").rglob("*") if p.is_file())
    ok = not diff
    report_criterion(11, ok, f"generate/pretrain/finetune/evaluate/sweep run twice: {n_files} files, differing {diff or 'none'}")
    assert ok
