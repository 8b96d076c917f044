#!/usr/bin/env python3
"""Benchmark the Cython kernel extension against the numpy fallback.

Times the hot paths behind training and colorspace conversion — im2col /
col2im patch movement and the fused sRGB<->CIELAB pixel loops — on shapes
matching the desk-scale model, and cross-checks that both backends agree.

Usage:
    python benchmarks/bench_kernels.py [--repeats 7] [--image-size 64]
"""

import argparse
import time

import numpy as np

from chromadiff._kernels import fallback

try:
    from chromadiff._kernels import _ext
except ImportError:
    _ext = None


def best_of(fn, repeats):
    times = []
    fn()  # warmup
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_case(name, make_args, runs, repeats):
    """Time one kernel on both backends; returns (name, t_fb, t_ext, dmax)."""
    args = make_args()
    fb = getattr(fallback, name)
    t_fb = best_of(lambda: runs(fb, args), repeats)
    if _ext is None:
        return name, t_fb, None, None
    ex = getattr(_ext, name)
    t_ext = best_of(lambda: runs(ex, args), repeats)
    ra, rb = runs(fb, args), runs(ex, args)
    dmax = float(np.max(np.abs(np.asarray(ra) - np.asarray(rb))))
    return name, t_fb, t_ext, dmax


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7,
                    help="timing repeats per case (best-of)")
    ap.add_argument("--image-size", type=int, default=64,
                    help="square image side for the colorspace cases")
    ap.add_argument("--batch", type=int, default=4,
                    help="batch size for the conv patch cases")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    hw = args.image_size
    img = rng.random((hw, hw, 3))
    lab = fallback.rgb_to_lab(img)
    # conv shapes as in the denoiser trunk: 32 channels, 3x3, padded
    x = rng.standard_normal((args.batch, 32, hw // 4, hw // 4))
    cols = fallback.im2col(x, 3, 3, 1, 1)

    cases = [
        ("rgb_to_lab", lambda: img, lambda f, a: f(a), "px loop"),
        ("lab_to_rgb", lambda: lab, lambda f, a: f(a)[0], "px loop"),
        ("srgb_decode", lambda: img, lambda f, a: f(a), "px loop"),
        ("srgb_encode", lambda: img, lambda f, a: f(a), "px loop"),
        ("im2col", lambda: x, lambda f, a: f(a, 3, 3, 1, 1), "patch gather"),
        ("col2im", lambda: cols,
         lambda f, a: f(a, x.shape, 3, 3, 1, 1), "patch scatter"),
    ]

    print(f"backends: fallback=numpy, ext="
          f"{'cython' if _ext is not None else 'NOT BUILT'}")
    print(f"shapes: image {hw}x{hw}x3, conv input {x.shape}\n")
    header = (f"{'kernel':<14} {'role':<14} {'fallback':>10} "
              f"{'ext':>10} {'speedup':>8} {'max|diff|':>10}")
    print(header)
    print("-" * len(header))
    for name, make_args, runs, role in cases:
        name, t_fb, t_ext, dmax = bench_case(name, make_args, runs,
                                             args.repeats)
        fb_ms = f"{t_fb * 1e3:8.3f}ms"
        if t_ext is None:
            print(f"{name:<14} {role:<14} {fb_ms:>10} {'-':>10} "
                  f"{'-':>8} {'-':>10}")
        else:
            ext_ms = f"{t_ext * 1e3:8.3f}ms"
            print(f"{name:<14} {role:<14} {fb_ms:>10} {ext_ms:>10} "
                  f"{t_fb / t_ext:7.2f}x {dmax:10.2e}")


if __name__ == "__main__":
    main()
