"""Numba vs numpy kernels on the O(N^2) pair sums.

Usage::

    python3 benchmarks/bench_kernels.py [--N 256 1024] [--repeat 5]

Prints one line per (kernel, d, s, N): best-of-``repeat`` wall time of both
paths, the speed-up, and the max relative deviation between their outputs.
"""
import argparse
import time

import numpy as np

from rieszlab import kernels
from rieszlab._accel import HAVE_NUMBA
from rieszlab.riesz import RieszParams, build_table


def best_time(fn, repeat):
    fn()  # warm-up (JIT compile / cache load)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, nargs="+", default=[256, 1024])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<8} {'d':>2} {'s':>5} {'N':>6} {'numba[s]':>10} {'numpy[s]':>10} {'speedup':>8} "
          f"{'max rel dev':>12}")
    for d, s in ((1, 0.0), (1, 0.5), (2, 0.0), (2, 1.5)):
        table = build_table(RieszParams(d, s))
        for N in args.N:
            x = rng.uniform(-0.5, 0.5, (N, d))
            targs = (x, *table.kernel_args)
            eps = (N ** (-1.0 / d)) / 8
            cases = dict(forces=targs + (eps,), energy=targs)
            for name, call_args in cases.items():
                nb = kernels.NUMBA_KERNELS[name]
                npy = kernels.NUMPY_KERNELS[name]
                t_nb = best_time(lambda: nb(*call_args), args.repeat)
                t_np = best_time(lambda: npy(*call_args), max(1, args.repeat // 2))
                a = np.asarray(nb(*call_args))
                b = np.asarray(npy(*call_args))
                dev = float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
                print(f"{name:<8} {d:>2} {s:>5} {N:>6} {t_nb:>10.4g} {t_np:>10.4g} {t_np / t_nb:>8.1f} {dev:>12.2e}")


if __name__ == "__main__":
    main()
