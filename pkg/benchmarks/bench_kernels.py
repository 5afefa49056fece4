"""Numba vs numpy backend timings for the three heavy kernels.

Run:  python3 benchmarks/bench_kernels.py [--repeats 5]

Each kernel is warmed once per backend before timing (the first numba call
pays compilation), then the best of ``repeats`` timings is reported.  The
final column checks that both backends agree to float tolerance on the
same inputs; a benchmark whose backends disagree is meaningless.
"""

import argparse
import time

import numpy as np

from streamkv import numerics
from streamkv.numerics import Conv3DSpec


def _conv_case(rng, t, h, w, c_in=4, c_out=16):
    x = rng.standard_normal((1, c_in, t, h, w))
    weights = rng.standard_normal((c_out, c_in, 3, 3, 3)) / np.sqrt(c_in * 27)
    spec = Conv3DSpec(c_in, c_out, (3, 3, 3), (1, 2, 2), (1, 1, 1),
                      weights, np.zeros(c_out))
    return lambda: numerics.conv3d(x, spec)


def _pool_case(rng, t, h, w):
    x = rng.standard_normal((1, 3, t, h, w))
    return lambda: numerics.avg_pool3d(x, (2, 4, 4))


def _attention_case(rng, l_q, l_k, heads=4, dim=16):
    q = rng.standard_normal((l_q, heads, dim))
    k = rng.standard_normal((l_k, heads, dim))
    v = rng.standard_normal((l_k, heads, dim))
    return lambda: numerics.attention(q, k, v)


def bench(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = [
        ("conv3d  4x32x32", _conv_case(rng, 4, 32, 32)),
        ("conv3d  8x64x64", _conv_case(rng, 8, 64, 64)),
        ("pool   16x128x128", _pool_case(rng, 16, 128, 128)),
        ("attn   192q 4k keys", _attention_case(rng, 192, 4096)),
        ("attn   192q 28k keys", _attention_case(rng, 192, 28672)),
    ]

    print(f"{'case':<22} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9} {'agree':>7}")
    for name, fn in cases:
        with numerics.use_backend("numpy"):
            ref = fn()
            t_np = bench(fn, args.repeats)
        try:
            with numerics.use_backend("numba"):
                fn()  # compile outside the timed region
                got = fn()
                t_nb = bench(fn, args.repeats)
        except ImportError:
            print(f"{name:<22} {t_np * 1e3:>12.2f} {'n/a':>12} {'n/a':>9} {'n/a':>7}")
            continue
        agree = np.allclose(ref, got, rtol=1e-10, atol=1e-10)
        print(f"{name:<22} {t_np * 1e3:>12.2f} {t_nb * 1e3:>12.2f} "
              f"{t_np / t_nb:>8.2f}x {str(agree):>7}")


if __name__ == "__main__":
    main()
