# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel for the penalized check-loss IRLS solver.

Single fused pass per iteration: residual, exact check loss, floored
weights, weighted gram (lower triangle) and right-hand side.  Mirrors
``_solver_py.irls_pass`` bit-for-bit in exact arithmetic; differences are
confined to floating-point summation order.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def irls_pass(cnp.ndarray[cnp.float64_t, ndim=2] X,
              cnp.ndarray[cnp.float64_t, ndim=1] y,
              cnp.ndarray[cnp.float64_t, ndim=1] beta,
              double tau,
              double h):
    """See ``_solver_py.irls_pass``; same contract, fused loops."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] G = np.zeros((p, p))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] rhs = np.zeros(p)
    cdef double[:, :] Xv = X
    cdef double[:] yv = y
    cdef double[:] bv = beta
    cdef double[:, :] Gv = G
    cdef double[:] rv = rhs
    cdef double loss = 0.0, smoothed = 0.0
    cdef double r, e, w, wy, xj, half = tau - 0.5
    cdef Py_ssize_t i, j, k

    for i in range(n):
        r = yv[i]
        for j in range(p):
            r -= Xv[i, j] * bv[j]
        if r < 0.0:
            loss += r * (tau - 1.0)
            e = -r
        else:
            loss += r * tau
            e = r
        if e < h:
            e = h
        smoothed += r * r / (4.0 * e) + 0.25 * e + half * r
        w = 0.5 / e
        wy = w * yv[i]
        for j in range(p):
            xj = Xv[i, j]
            rv[j] += wy * xj + half * xj
            for k in range(j + 1):
                Gv[j, k] += w * xj * Xv[i, k]

    for j in range(p):
        for k in range(j):
            Gv[k, j] = Gv[j, k]
    return G, rhs, loss, smoothed
