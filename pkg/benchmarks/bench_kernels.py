"""Benchmark the compiled convolution kernels against the numpy fallback.

Times forward, input-gradient, and weight-gradient kernels over the conv
shapes that actually occur in the 64x64 encoder/decoder pair, reports an
effective GFLOP/s figure per backend, and measures how much the compiled
kernels gain from skipping exact-zero weights at typical pruning levels.

Usage:
    python3 benchmarks/bench_kernels.py [--batch 4] [--repeats 5]
"""

import argparse
import time

import numpy as np

from stlth import _kernels_np

try:
    from stlth import _core
except ImportError:
    _core = None

# (in_ch, out_ch, spatial) for every conv in the encoder + mirrored decoder.
ENCODER_CONVS = [
    (3, 16, 64), (16, 16, 64),
    (16, 32, 32), (32, 32, 32),
    (32, 64, 16), (64, 64, 16),
    (64, 128, 8), (128, 128, 8),
]
DECODER_CONVS = [
    (128, 128, 8), (128, 64, 8),
    (64, 64, 16), (64, 32, 16),
    (32, 32, 32), (32, 16, 32),
    (16, 16, 64), (16, 3, 64),
]
KSIZE = 3


def conv_workload(batch, rng, density=1.0):
    """Build input/weight/grad buffers for every conv in the model."""
    work = []
    for ci, co, hw in ENCODER_CONVS + DECODER_CONVS:
        xpad = rng.standard_normal((batch, ci, hw + 2, hw + 2)).astype(np.float32)
        w = rng.standard_normal((co, ci, KSIZE, KSIZE)).astype(np.float32)
        mask = np.ones(w.shape, np.uint8)
        if density < 1.0:
            drop = rng.random(w.shape) >= density
            w[drop] = 0.0
            mask[drop] = 0
        b = rng.standard_normal(co).astype(np.float32)
        gout = rng.standard_normal((batch, co, hw, hw)).astype(np.float32)
        work.append((xpad, w, b, gout, mask))
    return work


def flops(batch, density=1.0):
    """Multiply-accumulate count (x2 for FLOPs, x3 for fwd+dx+dw)."""
    macs = 0
    for ci, co, hw in ENCODER_CONVS + DECODER_CONVS:
        macs += batch * ci * co * KSIZE * KSIZE * hw * hw
    return macs * 2 * 3 * density


def run_backend(mod, work, use_mask):
    for xpad, w, b, gout, mask in work:
        out = np.empty(gout.shape, np.float32)
        mod.conv2d_fwd(xpad, w, b, out, 1)
        dx = np.zeros(xpad.shape, np.float32)
        mod.conv2d_dx(gout, w, dx, 1)
        dw = np.empty(w.shape, np.float32)
        mod.conv2d_dw(xpad, gout, dw, mask if use_mask else np.ones(w.shape, np.uint8), 1)


def time_case(mod, work, repeats, use_mask=True):
    run_backend(mod, work, use_mask)  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_backend(mod, work, use_mask)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(7)
    dense = conv_workload(args.batch, rng)
    total = flops(args.batch)

    t_np = time_case(_kernels_np, dense, args.repeats)
    print(f"numpy    dense      batch={args.batch}: {t_np * 1e3:8.1f} ms  "
          f"{total / t_np / 1e9:6.1f} GFLOP/s")

    if _core is None:
        print("compiled backend not built; skipping")
        return

    t_c = time_case(_core, dense, args.repeats)
    print(f"compiled dense      batch={args.batch}: {t_c * 1e3:8.1f} ms  "
          f"{total / t_c / 1e9:6.1f} GFLOP/s  ({t_np / t_c:.2f}x vs numpy)")

    for density in (0.41, 0.108):
        sparse = conv_workload(args.batch, rng, density)
        t_s = time_case(_core, sparse, args.repeats)
        print(f"compiled {density * 100:4.1f}% kept batch={args.batch}: "
              f"{t_s * 1e3:8.1f} ms  ({t_c / t_s:.2f}x vs dense compiled)")


if __name__ == "__main__":
    main()
