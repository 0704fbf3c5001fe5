"""Benchmark the compiled convolution kernels against the NumPy fallback.

Usage: python benchmarks/bench_kernels.py [--reps N]

Single-threaded BLAS gives the most stable numbers:
    OPENBLAS_NUM_THREADS=1 python benchmarks/bench_kernels.py
"""

import argparse
import time

import numpy as np

from drogsure._kernels import _convpy

try:
    from drogsure._kernels import _convfast
except ImportError:
    _convfast = None

# (input shape, kernel shape): small fixture-scale maps up to 32x32 images
CASES = [
    ((120, 8, 8, 1), (3, 3, 1, 4)),
    ((120, 8, 8, 4), (3, 3, 4, 4)),
    ((120, 8, 8, 4), (1, 1, 4, 2)),
    ((120, 8, 8, 6), (3, 3, 6, 6)),
    ((160, 32, 32, 1), (3, 3, 1, 5)),
    ((160, 32, 32, 5), (1, 1, 5, 7)),
    ((160, 32, 32, 10), (5, 5, 10, 20)),
]


def _time(fn, reps):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps * 1e3


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--reps", type=int, default=50)
    args = parser.parse_args()
    if _convfast is None:
        print("compiled backend unavailable; benchmarking the fallback only")
    backends = [("numpy", _convpy)] + ([("compiled", _convfast)] if _convfast else [])

    header = f"{'case':34s} {'op':6s}" + "".join(f" {n:>10s}" for n, _ in backends)
    if len(backends) == 2:
        header += f" {'speedup':>8s}"
    print(header)
    gen = np.random.default_rng(0)
    for xs, ks in CASES:
        x = gen.random(xs)
        kern = gen.standard_normal(ks)
        pad = (ks[0] - 1) // 2
        reps = max(3, args.reps // max(1, xs[1] // 8))
        y = _convpy.conv2d_forward(x, kern, 1, pad)
        gy = gen.random(y.shape)
        ops = {
            "fwd": lambda mod: mod.conv2d_forward(x, kern, 1, pad),
            "kgrad": lambda mod: mod.conv2d_kernel_grad(x, gy, ks[0], 1, pad),
            "igrad": lambda mod: mod.conv2d_input_grad(gy, kern, 1, pad, xs[1], xs[2]),
        }
        label = f"{xs}x{ks[:2]}"
        for op, fn in ops.items():
            times = [_time(lambda m=mod: fn(m), reps) for _, mod in backends]
            row = f"{label:34s} {op:6s}" + "".join(f" {t:8.3f}ms" for t in times)
            if len(times) == 2:
                row += f" {times[0] / times[1]:7.2f}x"
            print(row)


if __name__ == "__main__":
    main()
