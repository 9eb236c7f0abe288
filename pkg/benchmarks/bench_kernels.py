#!/usr/bin/env python3
"""Benchmark the numba kernels against their numpy fallbacks.

Times the three hot loops (retrieval cosine scoring, box-QP projected
gradient, drawdown scan) on realistic sizes and prints one table row per
kernel/size. The numba column is skipped when numba is unavailable or
FINCON_NO_NUMBA is set.

Usage: python benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from fincon import _kernels


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_cosine(rng, repeats):
    rows = []
    for m in (1_000, 10_000, 100_000):
        emb = rng.standard_normal((m, 64))
        q = rng.standard_normal(64)
        candidates = {"numpy": lambda: _kernels.cosine_matrix_np(q, emb)}
        if _kernels.NUMBA_ENABLED:
            _kernels.cosine_matrix_nb(q, emb)  # compile/warm
            candidates["numba"] = lambda: _kernels.cosine_matrix_nb(q, emb)
        rows.append((f"cosine_matrix m={m}",
                     {k: timeit(f, repeats) for k, f in candidates.items()}))
    return rows


def bench_box_qp(rng, repeats):
    rows = []
    for n, solves in ((3, 500), (6, 500), (42, 100)):
        problems = []
        for _ in range(solves):
            a = rng.standard_normal((n, n))
            sigma = a.T @ a / n
            mu = rng.standard_normal(n)
            lo = np.where(rng.random(n) < 0.5, 0.0, -1.0)
            hi = lo + 1.0
            step = 1.0 / (2.0 * max(float(np.abs(sigma).sum(axis=1).max()), 1e-12))
            problems.append((mu, sigma, lo, hi, step))

        def run(kernel):
            for mu, sigma, lo, hi, step in problems:
                kernel(mu, sigma, lo, hi, step, 1e-10, 1e-8, 10_000)

        candidates = {"numpy": lambda: run(_kernels.box_qp_np)}
        if _kernels.NUMBA_ENABLED:
            p = problems[0]
            _kernels.box_qp_nb(p[0], p[1], p[2], p[3], p[4], 1e-10, 1e-8, 10_000)
            candidates["numba"] = lambda: run(_kernels.box_qp_nb)
        rows.append((f"box_qp n={n} x{solves}",
                     {k: timeit(f, repeats) for k, f in candidates.items()}))
    return rows


def bench_drawdown(rng, repeats):
    rows = []
    for m in (10_000, 1_000_000):
        values = np.exp(np.cumsum(rng.standard_normal(m) * 0.01)) * 100
        candidates = {"numpy": lambda: _kernels.drawdown_fraction_np(values)}
        if _kernels.NUMBA_ENABLED:
            _kernels.drawdown_fraction_nb(values)
            candidates["numba"] = lambda: _kernels.drawdown_fraction_nb(values)
        rows.append((f"drawdown m={m}",
                     {k: timeit(f, repeats) for k, f in candidates.items()}))
    return rows


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba enabled: {_kernels.NUMBA_ENABLED}")
    print(f"{'kernel':<28} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for bench in (bench_cosine, bench_box_qp, bench_drawdown):
        for name, times in bench(rng, args.repeats):
            np_t = times["numpy"]
            if "numba" in times:
                nb_t = times["numba"]
                print(f"{name:<28} {np_t * 1e3:>10.3f}ms {nb_t * 1e3:>10.3f}ms "
                      f"{np_t / nb_t:>8.1f}x")
            else:
                print(f"{name:<28} {np_t * 1e3:>10.3f}ms {'-':>12} {'-':>9}")


if __name__ == "__main__":
    main()
