"""Benchmark the compiled convolution kernels against the numpy reference.

Run: python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from twostream.kernels import reference

try:
    from twostream.kernels import _fastconv
except ImportError:
    _fastconv = None

SHAPES_2D = [
    # (cin, h, w, cout, k)   roughly the shapes the model actually runs
    (3, 128, 128, 32, 3),
    (32, 64, 64, 64, 3),
    (64, 32, 32, 256, 3),
    (256, 32, 32, 32, 1),
    (64, 16, 16, 384, 3),
]
SHAPES_1D = [(128, 9), (512, 9)]


def _time(fn, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv2d(mod, x, w):
    y = mod.conv2d_forward(x, w)
    g = np.ones_like(y)
    return (_time(lambda: mod.conv2d_forward(x, w)),
            _time(lambda: mod.conv2d_backward(x, w, g)))


def bench_conv1d(mod, x, k):
    y = mod.conv1d_forward(x, k)
    g = np.ones_like(y)
    return (_time(lambda: mod.conv1d_forward(x, k)),
            _time(lambda: mod.conv1d_backward(x, k, g)))


def main():
    if _fastconv is None:
        print("compiled backend unavailable; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'shape':>28} {'ref fwd':>9} {'fast fwd':>9} {'speedup':>8} "
          f"{'ref bwd':>9} {'fast bwd':>9} {'speedup':>8}")
    for cin, h, w, cout, k in SHAPES_2D:
        x = rng.standard_normal((cin, h, w)).astype(np.float32)
        wt = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
        rf, rb = bench_conv2d(reference, x, wt)
        ff, fb = bench_conv2d(_fastconv, x, wt)
        label = f"conv2d {cin}x{h}x{w}->{cout} k{k}"
        print(f"{label:>28} {rf*1e3:8.2f}m {ff*1e3:8.2f}m {rf/ff:7.2f}x "
              f"{rb*1e3:8.2f}m {fb*1e3:8.2f}m {rb/fb:7.2f}x")
    for n, k in SHAPES_1D:
        x = rng.standard_normal(n).astype(np.float32)
        kn = rng.standard_normal(k).astype(np.float32)
        rf, rb = bench_conv1d(reference, x, kn)
        ff, fb = bench_conv1d(_fastconv, x, kn)
        label = f"conv1d n={n} k={k}"
        print(f"{label:>28} {rf*1e6:8.2f}u {ff*1e6:8.2f}u {rf/ff:7.2f}x "
              f"{rb*1e6:8.2f}u {fb*1e6:8.2f}u {rb/fb:7.2f}x")


if __name__ == "__main__":
    main()
