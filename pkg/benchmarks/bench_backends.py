"""Times the numpy (im2col + BLAS) and numba (jitted shift-accumulate)
convolution kernels on geometries representative of a training step.

Run:  python3 benchmarks/bench_backends.py [--repeats N]

The numba functions are called once before timing so JIT compilation is
not measured. Results from both backends are cross-checked before timing;
a disagreement aborts the benchmark.
"""

import argparse
import time

import numpy as np

from stsc import kernels_numba, kernels_numpy

# (label, n, ci, co, h, w, k, stride, padding)
WORKLOAD = [
    ("enc 3->16 @64", 4, 3, 16, 64, 64, 3, 1, 1),
    ("enc 16->32 s2", 4, 16, 32, 64, 64, 3, 2, 1),
    ("enc 64->128 s2", 4, 64, 128, 16, 16, 3, 2, 1),
    ("dec 3x3 @32", 4, 96, 32, 32, 32, 3, 1, 1),
    ("vgg 64->64 @64", 4, 64, 64, 64, 64, 3, 1, 1),
    ("vgg 256->512 @8", 4, 256, 512, 8, 8, 3, 1, 1),
    ("cfrm 7x7 @32", 4, 64, 64, 32, 32, 7, 1, 3),
    ("1x1 fuse @32", 4, 192, 64, 32, 32, 1, 1, 0),
]


def _case(n, ci, co, h, w, k, stride, pad, rng):
    x = rng.normal(size=(n, ci, h, w)).astype(np.float32)
    wt = rng.normal(size=(co, ci, k, k)).astype(np.float32)
    b = rng.normal(size=co).astype(np.float32)
    return x, wt, b


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    rows = []
    totals = {"numpy": 0.0, "numba": 0.0}
    for label, n, ci, co, h, w, k, stride, pad in WORKLOAD:
        x, wt, b = _case(n, ci, co, h, w, k, stride, pad, rng)
        y_np = kernels_numpy.conv2d_forward(x, wt, b, stride, pad)
        y_nb = kernels_numba.conv2d_forward(x, wt, b, stride, pad)
        scale = max(np.abs(y_np).max(), 1.0)
        if np.abs(y_np - y_nb).max() / scale > 1e-5:
            raise SystemExit(f"backend disagreement on {label!r}")
        gout = rng.normal(size=y_np.shape).astype(np.float32)

        # warm the JIT
        kernels_numba.conv2d_backward_input(gout, wt, x.shape, stride, pad)
        kernels_numba.conv2d_backward_weight(gout, x, wt.shape, stride, pad)

        def full(mod):
            mod.conv2d_forward(x, wt, b, stride, pad)
            mod.conv2d_backward_input(gout, wt, x.shape, stride, pad)
            mod.conv2d_backward_weight(gout, x, wt.shape, stride, pad)

        t_np = _time(lambda: full(kernels_numpy), args.repeats)
        t_nb = _time(lambda: full(kernels_numba), args.repeats)
        totals["numpy"] += t_np
        totals["numba"] += t_nb
        rows.append((label, t_np, t_nb))

    print(f"{'case':<18} {'numpy ms':>10} {'numba ms':>10} {'numba/numpy':>12}")
    for label, t_np, t_nb in rows:
        print(f"{label:<18} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} "
              f"{t_nb / t_np:>11.1f}x")
    print(f"{'total':<18} {totals['numpy'] * 1e3:>10.2f} "
          f"{totals['numba'] * 1e3:>10.2f} "
          f"{totals['numba'] / totals['numpy']:>11.1f}x")


if __name__ == "__main__":
    main()
