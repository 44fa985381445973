"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the desk-scale workload: a batch of 48 three-channel 32x32
tiles through a 3x3 conv, and bilinear/nearest resampling of one tile set.
"""

import argparse
import timeit

import numpy as np

from cmcsar import kernels


def cases(rng):
    b, c, h, k = 48, 8, 32, 3
    xp = rng.standard_normal((b, c, h + 2, h + 2)).astype(np.float32)
    cols = rng.standard_normal((c * k * k, b * h * h)).astype(np.float32)
    img = rng.standard_normal((3, 448, 448)).astype(np.float32)
    yy, xx = np.meshgrid(np.linspace(-1, 448, 448), np.linspace(-1, 448, 448), indexing="ij")
    sy, sx = yy.astype(np.float64), xx.astype(np.float64)
    return {
        "im2col": lambda ns: ns.im2col(xp, k, 1, h, h),
        "col2im": lambda ns: ns.col2im(cols, b, c, h + 2, h + 2, k, 1, h, h),
        "sample_bilinear": lambda ns: ns.sample_bilinear(img, sy, sx),
        "sample_nearest": lambda ns: ns.sample_nearest(img, sy, sx),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("numpy", kernels.NUMPY)]
    if kernels.NUMBA is not None:
        backends.append(("numba", kernels.NUMBA))
    print(f"{'kernel':<16}" + "".join(f"{n + ' ms':>12}" for n, _ in backends) + f"{'speedup':>10}  max|diff|")
    for name, fn in cases(rng).items():
        times, outs = [], []
        for _, ns in backends:
            outs.append(fn(ns))  # warm-up, triggers JIT compilation
            times.append(min(timeit.repeat(lambda ns=ns: fn(ns), number=1, repeat=args.repeat)) * 1e3)
        diff = max(float(np.max(np.abs(o - outs[0]))) for o in outs)
        speed = f"{times[0] / times[-1]:>9.2f}x" if len(times) > 1 else f"{'n/a':>10}"
        print(f"{name:<16}" + "".join(f"{t:>12.3f}" for t in times) + f"{speed}  {diff:.2e}")


if __name__ == "__main__":
    main()
