"""Compiled vs numpy kernels: negacyclic NTT and wide modular products.

Usage: python3 bench/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from kangaroo import kernels
from kangaroo.bfv import ntt_context
from kangaroo.ntheory import ntt_primes


def best_ms(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = ["numpy"]
    try:
        kernels.load("compiled")
        impls.insert(0, "compiled")
    except ImportError:
        print("compiled kernels unavailable; numpy only")
    rng = np.random.default_rng(0)
    rows = []
    for n, k in ((4096, 4), (8192, 7)):
        mods = tuple(ntt_primes(31, 2 * n, k))
        ctx = ntt_context(n, mods)
        a = np.stack([rng.integers(0, q, n, dtype=np.uint64) for q in mods])
        for name in impls:
            mod = kernels.load(name)
            fwd = best_ms(lambda: ctx.forward(a.copy(), mod), args.repeat)
            inv = best_ms(lambda: ctx.inverse(a.copy(), mod), args.repeat)
            rows.append((f"ntt n={n} k={k}", name, fwd, inv))
    wide = np.array([(1 << 50) - 27], dtype=np.uint64)
    x = rng.integers(0, int(wide[0]), (1, 1 << 16), dtype=np.uint64)
    y = rng.integers(0, int(wide[0]), (1, 1 << 16), dtype=np.uint64)
    for name in impls:
        mod = kernels.load(name)
        t = best_ms(lambda: kernels.mulmod(x, y, wide, mod), args.repeat)
        rows.append(("mulmod 50-bit x65536", name, t, float("nan")))
    print(f"| kernel | impl | forward/op ms | inverse ms |\n|---|---|---|---|")
    for r in rows:
        print(f"| {r[0]} | {r[1]} | {r[2]:.3f} | {r[3]:.3f} |")


if __name__ == "__main__":
    main()
