"""Compare the compiled convolution core against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times forward and backward passes on the shapes the micro network actually
runs (batch 16, 16x16 images) and checks that both backends agree.
"""
import argparse
import time

import numpy as np

from colorflux import _kernels_py

try:
    from colorflux import _kernels
except ImportError:  # extension not built
    _kernels = None

SHAPES = [  # (batch, c_in, c_out, size, kernel)
    (16, 3, 16, 16, 3),
    (16, 16, 16, 16, 3),
    (16, 16, 3, 16, 3),
    (64, 16, 16, 16, 3),
]


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled core not built; run `pip install -e . --no-build-isolation` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'shape (B,Cin,Cout,HW,k)':<26}{'pass':<10}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}{'max diff':>11}")
    for B, ci, co, s, k in SHAPES:
        x = rng.standard_normal((B, ci, s, s))
        w = rng.standard_normal((co, ci, k, k))
        b = rng.standard_normal(co)
        dy = rng.standard_normal((B, co, s, s))
        for name, py, cy in (
            ("forward", lambda: _kernels_py.conv2d_forward(x, w, b), lambda: _kernels.conv2d_forward(x, w, b)),
            ("backward", lambda: _kernels_py.conv2d_backward(x, w, dy), lambda: _kernels.conv2d_backward(x, w, dy)),
        ):
            a, c = py(), cy()
            a = a if isinstance(a, tuple) else (a,)
            c = c if isinstance(c, tuple) else (c,)
            diff = max(float(np.max(np.abs(u - v))) for u, v in zip(a, c))
            tp, tc = _time(py, args.repeat), _time(cy, args.repeat)
            print(f"{str((B, ci, co, s, k)):<26}{name:<10}{tp * 1e3:>10.3f}{tc * 1e3:>11.3f}{tp / tc:>8.2f}x{diff:>11.2e}")


if __name__ == "__main__":
    main()
