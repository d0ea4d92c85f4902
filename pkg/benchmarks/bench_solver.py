"""Benchmark: compiled vs pure-numpy IRLS kernel, and the batched path.

The per-iteration pass (residuals, floored weights, weighted gram,
right-hand side) is the hot spot of every quantile fit.  The compiled
kernel fuses it into one loop over rows; the numpy fallback leans on
BLAS.  Expect the compiled kernel to win clearly on small/medium designs
where per-call overhead dominates, and BLAS to catch up on very wide
data.  The batched multi-tau driver is numpy-only (its gram collapses to
one GEMM) and is shown for scale.

Run:  python benchmarks/bench_solver.py
"""

import time

import numpy as np

import sqr._solver_py as solver_py
from sqr import solver
from sqr.bspline import difference_matrix

try:
    import sqr._solver_cy as solver_cy
except ImportError:
    solver_cy = None


def time_pass(kernel, X, y, beta, tau, h, repeats):
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeats):
            kernel.irls_pass(X, y, beta, tau, h)
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best


def bench_kernels():
    rng = np.random.default_rng(0)
    print(f"selected backend at import: {solver.BACKEND}")
    print(f"{'n':>8} {'p':>4} {'numpy':>12} {'cython':>12} {'speedup':>8}")
    for n, p in ((100, 7), (500, 7), (2500, 14), (10000, 14), (50000, 14)):
        X = np.ascontiguousarray(rng.random((n, p)))
        y = np.ascontiguousarray(rng.standard_normal(n))
        beta = rng.standard_normal(p)
        repeats = max(3, int(2e6 / (n * p)))
        t_py = time_pass(solver_py, X, y, beta, 0.5, 1e-3, repeats)
        if solver_cy is None:
            print(f"{n:>8} {p:>4} {t_py*1e3:>10.3f}ms {'n/a':>12}")
            continue
        t_cy = time_pass(solver_cy, X, y, beta, 0.5, 1e-3, repeats)
        G1, r1, l1, s1 = solver_py.irls_pass(X, y, beta, 0.5, 1e-3)
        G2, r2, l2, s2 = solver_cy.irls_pass(X, y, beta, 0.5, 1e-3)
        assert np.allclose(G1, G2) and np.allclose(r1, r2)
        print(
            f"{n:>8} {p:>4} {t_py*1e3:>10.3f}ms {t_cy*1e3:>10.3f}ms "
            f"{t_py / t_cy:>7.2f}x"
        )


def bench_full_fits():
    rng = np.random.default_rng(1)
    D = difference_matrix(2, 14)
    P = D.gram()
    print("\nfull fits (tau = 0.5, lambda = 1):")
    for n in (500, 5000, 50000):
        X = np.hstack([rng.random((n, 7)), rng.random((n, 7))])
        y = rng.standard_normal(n)
        t0 = time.perf_counter()
        _, obj, iters, ok = solver.irls_fit(X, y, 0.5, 1.0, P)
        dt = time.perf_counter() - t0
        print(f"  n={n:>6}: {dt:6.2f}s  iters={iters:4d} converged={ok}")
    print("\nbatched 99-tau grid (n = 50000):")
    X = np.hstack([rng.random((50000, 7)), rng.random((50000, 7))])
    y = rng.standard_normal(50000)
    taus = np.round(np.arange(1, 100) / 100, 2)
    t0 = time.perf_counter()
    _, _, iters, conv = solver.irls_fit_batch(X, y, taus, 1.0, P, rel_tol=1e-8)
    dt = time.perf_counter() - t0
    per_fit = dt / taus.size
    print(f"  {dt:6.1f}s total, {per_fit*1e3:6.1f}ms per level, "
          f"iters={iters}, all converged={bool(conv.all())}")


if __name__ == "__main__":
    bench_kernels()
    bench_full_fits()
