"""Time the ZNCC winner-take-all kernel for each available backend.

Usage::

    python3 benchmarks/bench_zncc.py [--height 256] [--width 512] [--max-disp 192] [--repeat 3]
"""

import argparse
import time

import numpy as np

from codedstereo import kernels
from codedstereo.stereo import window_stats


def bench(backend, args, left, right):
    lp, mu_l, sd_l = window_stats(left, args.radius)
    rp, mu_r, sd_r = window_stats(right, args.radius)
    times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        out = kernels.zncc_wta(lp, rp, mu_l, sd_l, mu_r, sd_r, args.radius, args.max_disp, 1e-4,
                               backend=backend)
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--max-disp", type=int, default=192)
    p.add_argument("--radius", type=int, default=4)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()

    rng = np.random.default_rng(0)
    left = rng.random((args.height, args.width))
    right = np.roll(left, -17, axis=1)
    results = {}
    for name in kernels.available_backends():
        results[name] = bench(name, args, left, right)
        print(f"{name:>8}: {results[name][0] * 1e3:9.1f} ms")
    if len(results) == 2:
        (tp, op), (tc, oc) = results["python"], results["cython"]
        diff = max(np.nanmax(np.abs(a - b)) for a, b in zip(op[0][1:], oc[0][1:]))
        print(f" speedup: {tp / tc:.2f}x   max score difference {diff:.2e}")


if __name__ == "__main__":
    main()
