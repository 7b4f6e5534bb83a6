"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes mirror the desk-scale model: spline bases for a KAN layer over a
training batch, and 3x3 unfold/fold over a fused 16-channel 8x8 map.
"""

import argparse
import timeit

import numpy as np

from cmswinkan import kernels
from cmswinkan.kan import SplineGrid


def cases(rng):
    g = SplineGrid.uniform()
    x = rng.uniform(-1.2, 1.2, 64 * 256 * 16)
    img = rng.normal(size=(64, 16, 8, 8))
    cols = kernels.unfold(img, 3, 1, 1)
    return {
        "bspline_basis (262k points, k=3)": lambda: kernels.bspline_basis(x, g.knots, g.k, g.lo, g.hi),
        "unfold 3x3 [64,16,8,8]": lambda: kernels.unfold(img, 3, 1, 1),
        "fold 3x3 [64,16,8,8]": lambda: kernels.fold(cols, 8, 8, 3, 1, 1),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    results = {}
    for name in ("numba", "numpy"):
        kernels.set_backend(name)
        for label, fn in cases(rng).items():
            fn()  # warm-up, includes jit compilation
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            results.setdefault(label, {})[name] = best
    print(f"{'kernel':36s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, r in results.items():
        print(f"{label:36s} {1e3 * r['numba']:10.2f} {1e3 * r['numpy']:10.2f} {r['numpy'] / r['numba']:8.1f}x")


if __name__ == "__main__":
    main()
