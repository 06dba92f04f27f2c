#!/usr/bin/env python3
"""Benchmark the numpy (BLAS) and numba kernel backends against each other.

Times the hot kernels at the exact shapes the segmentation model exercises
at batch 8, plus a full training step, and reports the speed ratio and the
worst numeric disagreement. Select the active backend for real runs with
PLUTONET_BACKEND=numpy|numba.

Usage: python benchmarks/bench_kernels.py [--batch 8] [--repeats 3]
"""

import argparse
import time

import numpy as np

from plutonet import kernels
from plutonet.backbone import BackboneConfig
from plutonet.decoders import PlutoNet
from plutonet.losses import LossConfig, consistency_loss, supervised_loss, total_loss
from plutonet.optim import Adam

# (label, x shape, w shape, stride, pad) at 224x224 input resolution
CONV_CASES = [
    ("stem 7x7/4 3-16", (1, 3, 224, 224), (16, 3, 7, 7), (4, 4), (3, 3)),
    ("stage 3x3/2 16-24", (1, 16, 56, 56), (24, 16, 3, 3), (2, 2), (1, 1)),
    ("reduce 1x1 24-64", (1, 24, 28, 28), (64, 24, 1, 1), (1, 1), (0, 0)),
    ("decoder 3x3 192-64 @28", (1, 192, 28, 28), (64, 192, 3, 3), (1, 1), (1, 1)),
    ("decoder 3x1 192-64 @28", (1, 192, 28, 28), (64, 192, 3, 1), (1, 1), (1, 0)),
    ("decoder 3x3 192-64 @14", (1, 192, 14, 14), (64, 192, 3, 3), (1, 1), (1, 1)),
]

RESIZE_CASES = [
    ("head upsample 28-224", (1, 1, 28, 28), (224, 224)),
    ("skip upsample 7-28", (1, 64, 7, 7), (28, 28)),
    ("skip downsample 28-7", (1, 64, 28, 28), (7, 7)),
]


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        tic = time.perf_counter()
        fn()
        times.append(time.perf_counter() - tic)
    return min(times)


def bench_conv(batch, repeats):
    rng = np.random.default_rng(0)
    rows = []
    for label, xs, ws, stride, pad in CONV_CASES:
        x = rng.standard_normal((batch,) + xs[1:]).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        b = np.zeros(ws[0], dtype=np.float32)
        out_ref = {}
        timings = {}
        for backend in ("numpy", "numba"):
            kernels.set_backend(backend)
            kernels.conv2d_forward(x, w, b, stride, pad)  # warm/JIT
            timings[backend] = best_of(
                lambda: kernels.conv2d_forward(x, w, b, stride, pad), repeats
            )
            out_ref[backend] = kernels.conv2d_forward(x, w, b, stride, pad)
        diff = float(np.abs(out_ref["numpy"] - out_ref["numba"]).max())
        rows.append((label, timings["numpy"], timings["numba"], diff))
    return rows


def bench_resize(batch, repeats):
    rng = np.random.default_rng(1)
    rows = []
    for label, xs, target in RESIZE_CASES:
        x = rng.standard_normal((batch,) + xs[1:]).astype(np.float32)
        outs = {}
        timings = {}
        for backend in ("numpy", "numba"):
            kernels.set_backend(backend)
            kernels.resize_bilinear_forward(x, *target)
            timings[backend] = best_of(
                lambda: kernels.resize_bilinear_forward(x, *target), repeats
            )
            outs[backend] = kernels.resize_bilinear_forward(x, *target)
        diff = float(np.abs(outs["numpy"] - outs["numba"]).max())
        rows.append((label, timings["numpy"], timings["numba"], diff))
    return rows


def bench_training_step(batch, repeats):
    rng = np.random.default_rng(2)
    x = rng.random((batch, 3, 224, 224), dtype=np.float32)
    gt = (rng.random((batch, 1, 224, 224)) > 0.7).astype(np.float32)
    cfg = LossConfig()
    timings = {}
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        model = PlutoNet(BackboneConfig(variant="tiny"), seed=3)
        optimizer = Adam(model.parameters())

        def step():
            p_m, p_a = model.forward(x, training=True)
            bundle = total_loss(
                supervised_loss(p_m, gt, cfg), consistency_loss(p_m, p_a, cfg), cfg
            )
            optimizer.zero_grad()
            bundle.total.backward()
            optimizer.step()

        step()  # warm/JIT
        timings[backend] = best_of(step, repeats)
    return timings


def print_table(title, rows):
    print(f"\n{title}")
    print(f"{'case':30} {'numpy':>10} {'numba':>10} {'numba/numpy':>12} {'max|diff|':>10}")
    for label, t_np, t_nb, diff in rows:
        print(f"{label:30} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms {t_nb / t_np:11.2f}x {diff:10.2e}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=8)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    print(f"batch={args.batch} repeats={args.repeats} (best-of timing)")
    print_table("conv2d forward", bench_conv(args.batch, args.repeats))
    print_table("bilinear resize forward", bench_resize(args.batch, args.repeats))
    step = bench_training_step(args.batch, args.repeats)
    print("\nfull training step (tiny backbone, forward+backward+adam)")
    print(f"{'numpy':>10}: {step['numpy'] * 1e3:9.1f}ms")
    print(f"{'numba':>10}: {step['numba'] * 1e3:9.1f}ms  ({step['numba'] / step['numpy']:.2f}x numpy)")


if __name__ == "__main__":
    main()
