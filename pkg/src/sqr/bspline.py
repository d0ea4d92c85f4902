"""B-spline bases with replicated boundary knots and difference penalties.

A basis of degree ``r`` with interior-knot parameter ``K_n`` (``K_n - 1``
interior knots) spans ``r + K_n`` functions on a closed support
``[l_x, u_x]``.  Interior knots are placed either at quantiles of observed
covariate values or equally spaced on the support; boundary knots are
replicated ``r + 1`` times on each side.  Evaluation uses the Cox-de Boor
recursion with the 0/0 -> 0 convention, so duplicate interior knots (ties
in data quantiles) degrade gracefully.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

__all__ = [
    "BSplineBasis",
    "DifferenceMatrix",
    "make_knots",
    "basis_eval",
    "basis_matrix",
    "build_design",
    "build_design_matrix",
    "difference_matrix",
]


class BSplineError(ValueError):
    """Invalid basis construction or evaluation request."""


@dataclass(frozen=True)
class BSplineBasis:
    """Immutable B-spline basis specification.

    ``knots`` is the full vector, boundary knots replicated, of length
    ``K_n + 2*degree + 1``.  Evaluation of any x in the support yields a
    nonnegative vector of length ``degree + K_n`` summing to one.
    """

    degree: int
    interior_knot_count: int  # K_n; there are K_n - 1 interior knots
    knots: np.ndarray
    support: tuple[float, float]

    def __post_init__(self):
        if self.degree < 0:
            raise BSplineError(f"degree must be >= 0, got {self.degree}")
        if self.interior_knot_count < 1:
            raise BSplineError(
                f"interior_knot_count must be >= 1, got {self.interior_knot_count}"
            )
        knots = np.asarray(self.knots, dtype=float)
        expected = self.interior_knot_count + 2 * self.degree + 1
        if knots.shape != (expected,):
            raise BSplineError(
                f"knot vector must have length {expected}, got {knots.shape}"
            )
        if np.any(np.diff(knots) < 0):
            raise BSplineError("knots must be non-decreasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(
            self, "support", (float(self.support[0]), float(self.support[1]))
        )

    @property
    def size(self) -> int:
        """Number of basis functions, r + K_n."""
        return self.degree + self.interior_knot_count

    def __call__(self, x, clamp: bool = False) -> np.ndarray:
        return basis_eval(self, x, clamp=clamp)


def make_knots(
    observed_values,
    interior_knot_count: int,
    support: tuple[float, float],
    placement: str = "quantile",
) -> np.ndarray:
    """Full knot vector for a degree-agnostic interior layout.

    Interior knots sit at the k/K_n quantiles of ``observed_values``
    (``placement="quantile"``; numpy's linear interpolation convention) or
    equally spaced on the support (``placement="equally_spaced"``).  This
    returns only interior knots plus one copy of each boundary; callers
    building a :class:`BSplineBasis` replicate boundaries per degree.
    """
    values = np.asarray(observed_values, dtype=float)
    if values.size == 0:
        raise BSplineError("observed_values must be nonempty")
    lo, hi = float(support[0]), float(support[1])
    if not lo < hi:
        raise BSplineError(f"support must be a nondegenerate interval, got {support}")
    if np.any(values < lo) or np.any(values > hi):
        raise BSplineError("observed values fall outside the stated support")
    K_n = int(interior_knot_count)
    if K_n < 1:
        raise BSplineError(f"interior_knot_count must be >= 1, got {K_n}")
    if placement == "quantile":
        probs = np.arange(1, K_n) / K_n
        interior = np.quantile(values, probs) if K_n > 1 else np.empty(0)
    elif placement == "equally_spaced":
        interior = lo + (hi - lo) * np.arange(1, K_n) / K_n
    else:
        raise BSplineError(f"unknown placement {placement!r}")
    return np.concatenate([[lo], np.sort(interior), [hi]])


def bspline_basis(
    observed_values,
    degree: int,
    interior_knot_count: int,
    support: tuple[float, float],
    placement: str = "quantile",
) -> BSplineBasis:
    """Construct a basis: knot layout from data, boundaries replicated."""
    base = make_knots(observed_values, interior_knot_count, support, placement)
    lo, hi = float(support[0]), float(support[1])
    full = np.concatenate(
        [np.full(degree, lo), base, np.full(degree, hi)]
    )
    return BSplineBasis(
        degree=degree,
        interior_knot_count=int(interior_knot_count),
        knots=full,
        support=(lo, hi),
    )


def _check_support(basis: BSplineBasis, x: np.ndarray, clamp: bool) -> np.ndarray:
    lo, hi = basis.support
    if clamp:
        return np.clip(x, lo, hi)
    bad = (x < lo) | (x > hi)
    if np.any(bad):
        raise BSplineError(
            f"x outside support [{lo}, {hi}] (first offender {x[np.argmax(bad)]}); "
            "pass clamp=True to clamp to the boundary"
        )
    return x


def basis_matrix(basis: BSplineBasis, x, clamp: bool = False) -> np.ndarray:
    """Evaluate all basis functions at each x; shape (len(x), r + K_n).

    Cox-de Boor recursion.  Both support endpoints are assigned to their
    nearest nonempty knot interval so the basis is defined on the closed
    support; 0/0 terms from zero-width intervals contribute zero.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise BSplineError("x must be finite")
    x = _check_support(basis, x, clamp)
    t = basis.knots
    p = basis.degree
    nb = basis.size

    # Degree-0 layer: one-hot on the knot interval containing x.  searchsorted
    # with side="right" picks the last interval with t[i] <= x; clipping into
    # [p, nb - 1] covers both boundaries and skips zero-width end intervals.
    span = np.searchsorted(t, x, side="right") - 1
    span = np.clip(span, p, nb - 1)
    n_funcs = len(t) - 1
    B = np.zeros((x.size, n_funcs))
    B[np.arange(x.size), span] = 1.0

    for s in range(1, p + 1):
        n_prev = n_funcs - s + 1
        n_cur = n_funcs - s
        denom_l = t[s : s + n_cur] - t[:n_cur]
        denom_r = t[s + 1 : s + 1 + n_cur] - t[1 : 1 + n_cur]
        with np.errstate(divide="ignore", invalid="ignore"):
            wl = np.where(denom_l > 0, (x[:, None] - t[:n_cur]) / denom_l, 0.0)
            wr = np.where(
                denom_r > 0, (t[s + 1 : s + 1 + n_cur] - x[:, None]) / denom_r, 0.0
            )
        B = wl * B[:, :n_cur] + wr * B[:, 1 : n_prev]
    return B[:, :nb]


def basis_eval(basis: BSplineBasis, x: float, clamp: bool = False) -> np.ndarray:
    """Basis vector at a scalar x: length r + K_n, nonnegative, sums to 1."""
    return basis_matrix(basis, [x], clamp=clamp)[0]


def build_design(bases, covariates, clamp: bool = False) -> np.ndarray:
    """One design row: concatenated per-covariate basis evaluations."""
    bases = list(bases)
    covariates = np.atleast_1d(np.asarray(covariates, dtype=float))
    if len(bases) != covariates.size:
        raise BSplineError(
            f"{len(bases)} bases but {covariates.size} covariates supplied"
        )
    return np.concatenate(
        [basis_eval(b, c, clamp=clamp) for b, c in zip(bases, covariates)]
    )


def build_design_matrix(bases, columns, clamp: bool = False) -> np.ndarray:
    """Stacked design rows; ``columns`` holds one covariate vector per basis."""
    bases = list(bases)
    columns = [np.asarray(c, dtype=float) for c in columns]
    if len(bases) != len(columns):
        raise BSplineError(
            f"{len(bases)} bases but {len(columns)} covariate columns supplied"
        )
    n = columns[0].size
    for c in columns:
        if c.size != n:
            raise BSplineError("covariate columns differ in length")
    return np.hstack([basis_matrix(b, c, clamp=clamp) for b, c in zip(bases, columns)])


@dataclass(frozen=True)
class DifferenceMatrix:
    """m-th order finite-difference matrix acting on coefficient vectors."""

    order: int
    coefficient_count: int
    entries: np.ndarray

    def gram(self) -> np.ndarray:
        """D'D, the penalty matrix in beta' D'D beta."""
        return self.entries.T @ self.entries


def difference_matrix(m: int, p: int) -> DifferenceMatrix:
    """(p - m) x p matrix whose rows hold the m-th difference stencil.

    Row k applies signed binomial coefficients (-1)^(m-j) C(m, j) to
    coefficients k..k+m; for m = 2 each row reads (1, -2, 1).
    """
    if m < 1:
        raise BSplineError(f"difference order must be >= 1, got {m}")
    if p <= m:
        raise BSplineError(f"need coefficient_count > order, got p={p}, m={m}")
    stencil = np.array([(-1) ** (m - j) * comb(m, j) for j in range(m + 1)], float)
    D = np.zeros((p - m, p))
    for k in range(p - m):
        D[k, k : k + m + 1] = stencil
    return DifferenceMatrix(order=m, coefficient_count=p, entries=D)
