#!/usr/bin/env python3
"""Compare the numba and numpy convolution paths on the model's hot shapes.

Usage: python benchmarks/bench_kernels.py [--quick] [--dtype float32|float64]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fbnet import kernels as K

# (B, Cin, H, W, Cout, k, stride, dilation, padding) - drawn from the toy model
SHAPES = [
    ("stem 3->16 /2", (8, 3, 64, 64, 16, 3, 2, 1, 1)),
    ("stage2 32ch /2", (8, 16, 16, 16, 32, 3, 2, 1, 1)),
    ("stage3 64ch d2", (8, 64, 8, 8, 64, 3, 1, 2, 2)),
    ("stage4 128ch d4", (8, 128, 8, 8, 128, 3, 1, 4, 4)),
    ("head 160->40", (8, 160, 16, 16, 40, 3, 1, 1, 1)),
    ("mid 64->32", (8, 64, 8, 8, 32, 3, 1, 1, 1)),
    ("1x1 160->40", (8, 160, 16, 16, 40, 1, 1, 1, 0)),
]


def bench(fn, args, reps):
    # settle so the other implementation's spin-waiting worker threads park
    # (OpenBLAS and the numba pool contend on small core counts), then warm up
    time.sleep(0.05)
    for _ in range(3):
        fn(*args)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps * 1000.0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true", help="fewer repetitions")
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = ap.parse_args()
    reps = 10 if args.quick else 30
    dtype = np.float32 if args.dtype == "float32" else np.float64

    rng = np.random.default_rng(0)
    print(f"active backend: {K.ACTIVE_BACKEND} | dtype {args.dtype} | {reps} reps")
    header = f"{'shape':18s} {'op':5s} {'numpy ms':>9s} {'numba ms':>9s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    totals = {"numpy": 0.0, "numba": 0.0}
    for name, (b, cin, h, w, cout, k, s, d, p) in SHAPES:
        x = rng.normal(size=(b, cin, h, w)).astype(dtype)
        wt = rng.normal(size=(cout, cin, k, k)).astype(dtype)
        y = K.conv2d_forward_numpy(x, wt, s, d, p)
        gy = rng.normal(size=y.shape).astype(dtype)
        rows = [
            ("fwd", K.conv2d_forward_numpy, K.conv2d_forward_numba, (x, wt, s, d, p)),
            ("bwd_x", K.conv2d_backward_input_numpy, K.conv2d_backward_input_numba,
             (gy, wt, x.shape, s, d, p)),
            ("bwd_w", K.conv2d_backward_weight_numpy, K.conv2d_backward_weight_numba,
             (gy, x, wt.shape, s, d, p)),
        ]
        for op, f_np, f_nb, a in rows:
            t_np = bench(f_np, a, reps)
            t_nb = bench(f_nb, a, reps)
            totals["numpy"] += t_np
            totals["numba"] += t_nb
            print(f"{name:18s} {op:5s} {t_np:9.2f} {t_nb:9.2f} {t_np / t_nb:7.2f}x")
    print("-" * len(header))
    print(f"{'total':18s} {'':5s} {totals['numpy']:9.2f} {totals['numba']:9.2f} "
          f"{totals['numpy'] / totals['numba']:7.2f}x")


if __name__ == "__main__":
    main()
