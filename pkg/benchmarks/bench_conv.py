"""Timing comparison of the compiled vs pure-numpy convolution kernels.

Times im2col and col2im (the unfold/fold steps inside conv2d, which are
what the compiled extension accelerates; the surrounding matmuls are BLAS
either way) at the three layer shapes used by the encoder, then prints a
per-shape speedup table.

Usage: python3 benchmarks/bench_conv.py [repeats]
"""

import sys
import timeit

import numpy as np

from mtlmi._kernels import fallback

try:
    from mtlmi._kernels import _convkernels
except ImportError:
    _convkernels = None

SHAPES = [
    # (batch, channels, padded size, stride) matching the encoder stack
    (16, 3, 34, 1),
    (16, 16, 34, 2),
    (16, 32, 18, 2),
]


def time_backend(mod, repeats: int) -> list[float]:
    rng = np.random.default_rng(0)
    times = []
    for n, c, hp, stride in SHAPES:
        padded = rng.standard_normal((n, c, hp, hp))
        cols = np.asarray(mod.im2col(padded, 3, 3, stride))
        grad = rng.standard_normal(cols.shape)

        def step():
            mod.im2col(padded, 3, 3, stride)
            mod.col2im(grad, n, c, hp, hp, 3, 3, stride)

        step()  # warm up
        times.append(min(timeit.repeat(step, number=repeats, repeat=5))
                     / repeats * 1e3)
    return times


def main() -> int:
    repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 100
    slow = time_backend(fallback, repeats)
    if _convkernels is None:
        print("compiled extension not built; fallback timings only")
        for (n, c, hp, stride), ms in zip(SHAPES, slow):
            print(f"{n}x{c}x{hp}x{hp} s{stride}: {ms:.3f} ms")
        return 0
    fast = time_backend(_convkernels, repeats)
    print(f"{'shape (padded, s=stride)':<26} {'cython ms':>10} "
          f"{'numpy ms':>10} {'speedup':>8}")
    for (n, c, hp, stride), f, s in zip(SHAPES, fast, slow):
        print(f"{f'{n}x{c}x{hp}x{hp} s{stride}':<26} {f:>10.3f} "
              f"{s:>10.3f} {s / f:>7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
