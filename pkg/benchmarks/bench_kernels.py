#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-NumPy fallbacks.

Runs every kernel pair on representative workload sizes and prints a
comparison table. The numba path is warmed up before timing so JIT
compilation is not measured.

    python benchmarks/bench_kernels.py [--repeats N] [--scale small|full]
"""

import argparse
import time

import numpy as np

from zrcg import kernels
from zrcg.backend import NUMBA_ENABLED


def timeit(fn, args, repeats):
    fn(*args)  # warm-up (JIT compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def gru_args(n_users, seq_len, d, rng):
    X = rng.standard_normal((n_users, seq_len, d)).astype(np.float32)
    lengths = rng.integers(1, seq_len + 1, n_users)
    Ws = [(rng.standard_normal((d, d)) * 0.3).astype(np.float32) for _ in range(6)]
    bs = [(rng.standard_normal(d) * 0.1).astype(np.float32) for _ in range(3)]
    fwd = (X, lengths, Ws[0], Ws[1], bs[0], Ws[2], Ws[3], bs[1], Ws[4], Ws[5], bs[2])
    caches = kernels.gru_forward_np(*fwd)[1:]
    dH = rng.standard_normal((n_users, d)).astype(np.float32)
    bwd = (X, lengths, *caches, Ws[0], Ws[1], Ws[2], Ws[3], Ws[4], Ws[5], dH)
    return fwd, bwd


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--scale", choices=("small", "full"), default="full")
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    if args.scale == "full":
        n_users, seq_len, d = 128, 20, 32
        n_gen, n_eval, n_items, n_neg, k = 400, 5000, 2000, 100, 16
    else:
        n_users, seq_len, d = 32, 10, 16
        n_gen, n_eval, n_items, n_neg, k = 100, 500, 300, 50, 8

    fwd, bwd = gru_args(n_users, seq_len, d, rng)
    E = rng.standard_normal((n_gen, d)).astype(np.float32)
    U = rng.standard_normal((n_eval, d)).astype(np.float32)
    items = rng.standard_normal((n_items, d)).astype(np.float32)
    truth = rng.integers(0, n_items, n_eval)
    negs = rng.integers(0, n_items, (n_eval, n_neg))
    Xk = rng.standard_normal((n_eval, d)).astype(np.float32)
    C = rng.standard_normal((k, d)).astype(np.float32)

    cases = [
        (f"gru_forward ({n_users}x{seq_len}x{d})", kernels.gru_forward_nb,
         kernels.gru_forward_np, fwd),
        (f"gru_backward ({n_users}x{seq_len}x{d})", kernels.gru_backward_nb,
         kernels.gru_backward_np, bwd),
        (f"entropy ({n_gen}x{d})", kernels.entropy_nb, kernels.entropy_np,
         (E, 0.15, False, 1e-12)),
        (f"rank_against ({n_eval}x{n_neg} of {n_items})", kernels.rank_nb,
         kernels.rank_np, (U, items, truth, negs)),
        (f"kmeans_assign ({n_eval}x{d}, k={k})", kernels.kmeans_assign_nb,
         kernels.kmeans_assign_np, (Xk, C)),
    ]

    print(f"numba backend enabled: {NUMBA_ENABLED}")
    print(f"{'kernel':<42} {'numba':>12} {'numpy':>12} {'speedup':>9}")
    print("-" * 79)
    speedups = []
    for name, fn_nb, fn_np, call_args in cases:
        t_nb = timeit(fn_nb, call_args, args.repeats)
        t_np = timeit(fn_np, call_args, args.repeats)
        speedups.append(t_np / t_nb)
        print(f"{name:<42} {t_nb*1e3:>10.3f}ms {t_np*1e3:>10.3f}ms {t_np/t_nb:>8.2f}x")
    print("-" * 79)
    print(f"geometric mean speedup: {np.exp(np.mean(np.log(speedups))):.2f}x")
    if not NUMBA_ENABLED:
        print("note: ZRCG_NUMBA=0 or numba unavailable; the 'numba' column is "
              "running uncompiled Python loops")


if __name__ == "__main__":
    main()
