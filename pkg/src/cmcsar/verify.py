"""Embedded oracle suite run by ``cmcsar verify``.

Each check returns ``(cases, max_deviation, tolerance, detail)``; a check
passes when the deviation is within tolerance. The suite is fast (a few
seconds) and deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import make_grid, merge
from .gradcheck import check
from .loss import EmbeddingSet, fullgraph_cmc_loss, loss_oracle, pairwise_loss
from .tensor import BatchNormState, Tensor
from .training import lr_schedule


@dataclass
class CheckResult:
    name: str
    cases: int
    deviation: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self):
        return math.isfinite(self.deviation) and self.deviation <= self.tolerance


def _random_embedding(rng, dtype=np.float64):
    b = int(rng.integers(2, 5))
    m = int(rng.integers(1, 4))
    n = int(rng.integers(1, 3))
    if m * n < 2:
        n = 2
    d = int(rng.integers(2, 9))
    z = rng.standard_normal((b, m * n, d))
    labels = [mi for mi in range(m) for _ in range(n)]
    tau = float(rng.uniform(0.05, 1.0))
    return EmbeddingSet(Tensor(z, dtype=dtype), labels, tau)


def check_loss_oracle(instances=200, seed=0):
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for i in range(instances):
        e = _random_embedding(rng)
        dev = abs(fullgraph_cmc_loss(e).item() - loss_oracle(e))
        if dev > worst:
            worst, where = dev, f"instance {i} shape {e.z.shape}"
    return CheckResult("loss vs brute-force oracle", instances, worst, 1e-6, where)


def check_hand_case():
    z = np.array([[[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]])
    got = fullgraph_cmc_loss(EmbeddingSet(Tensor(z, dtype=np.float64), [0, 0], 1.0)).item()
    want = 4 * math.log(1 + math.exp(-1))
    return CheckResult("hand case 4·log(1+e^-1)", 1, abs(got - want), 1e-5, f"got {got:.8f}")


def check_pairwise_degenerate():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((2, 5))
    single = abs(pairwise_loss(Tensor(z, dtype=np.float64), [1, 0], 0.5).item())
    worst = single
    for n in (2, 3, 5):
        u = np.tile([[1.0, 2.0, 3.0]], (2 * n, 1))
        partner = [i + 1 if i % 2 == 0 else i - 1 for i in range(2 * n)]
        got = pairwise_loss(Tensor(u, dtype=np.float64), partner, 1.0).item()
        worst = max(worst, abs(got - 2 * n * math.log(2 * n - 1)))
    return CheckResult("pairwise N=1 and uniform cases", 4, worst, 1e-6)


def _grad_cases(rng):
    x = rng.uniform(-2, 2, (2, 2, 6, 6))
    w = rng.uniform(-1, 1, (3, 2, 3, 3))
    a = rng.uniform(-2, 2, (4, 3))
    bn = lambda x, g, b: T.batchnorm(x, g, b, "train", BatchNormState(3))  # noqa: E731
    e = _random_embedding(rng)
    return [
        ("matmul", T.matmul, [a, rng.uniform(-2, 2, (3, 2))]),
        ("conv2d", lambda x, w: T.conv2d(x, w, pad=1), [x, w]),
        ("logsumexp", lambda a: T.logsumexp(a, axis=1), [a]),
        ("batchnorm", bn, [a, rng.uniform(0.5, 2, 3), rng.uniform(-1, 1, 3)]),
        ("sigmoid", T.sigmoid, [a]),
        ("l2_normalize", lambda a: T.l2_normalize(a, axis=1), [a]),
        ("fullgraph loss", lambda z: fullgraph_cmc_loss(EmbeddingSet(z, e.modality_of_view, e.temperature)), [e.z.data]),
    ]


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    cases = _grad_cases(rng)
    for name, fn, args in cases:
        err = check(fn, args)
        if err > worst:
            worst, where = err, name
    return CheckResult("finite-difference gradients", len(cases), worst, 1e-3, f"worst: {where}")


def check_patch_merge():
    worst = 0.0
    counts = []
    for extent, size, stride, want in ((900, 300, 150, 25), (64, 32, 16, 9), (70, 32, 16, None)):
        grid = make_grid(extent, size, stride)
        counts.append(len(grid.offsets))
        if want is not None and len(grid.offsets) != want:
            worst = max(worst, abs(len(grid.offsets) - want))
        field_ = np.random.default_rng(extent).random((1, extent, extent)).astype(np.float32)
        preds = [((y, x), field_[:, y : y + size, x : x + size]) for y, x in grid.offsets]
        merged = merge(preds, grid, (extent, extent))
        worst = max(worst, float(np.max(np.abs(merged - field_))))
    return CheckResult("patch grid and merge roundtrip", 3, worst, 0.0, f"patches {counts}")


def check_schedule():
    base, w, total = 0.1, 10, 500
    dev = abs(lr_schedule(w - 1, base, w, total) - base)
    for e in (0, 4, 10, 11, 100, 255, 499):
        if e < w:
            want = base * (e + 1) / w
        else:
            want = 0.5 * base * (1 + math.cos(math.pi * (e - w) / (total - w)))
        dev = max(dev, abs(lr_schedule(e, base, w, total) - want))
    lrs = [lr_schedule(e, base, w, total) for e in range(w, total)]
    rising = max([b - a for a, b in zip(lrs, lrs[1:])] + [0.0])
    return CheckResult("warm-up cosine schedule", 8 + len(lrs), max(dev, rising), 1e-9)


CHECKS = (
    check_loss_oracle,
    check_hand_case,
    check_pairwise_degenerate,
    check_gradients,
    check_patch_merge,
    check_schedule,
)


def run_all():
    results = []
    for fn in CHECKS:
        try:
            results.append(fn())
        except Exception as exc:  # a crashing check is a failing check
            results.append(CheckResult(fn.__name__, 0, float("inf"), 0.0, f"{type(exc).__name__}: {exc}"))
    return results


def format_table(results):
    head = f"{'check':<34} {'cases':>6} {'max dev':>11} {'tol':>9}  status"
    lines = [head, "-" * len(head)]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<34} {r.cases:>6} {r.deviation:>11.3e} {r.tolerance:>9.1e}  {status}  {r.detail}".rstrip())
    return "\n".join(lines)
