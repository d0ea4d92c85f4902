"""Time trends, detrending, stock normalization and base-year conversion.

Price and yield trends are penalized least-squares B-splines on the year
index (degree 3, one knot every ``knot_spacing_years`` years, second
difference penalty, lambda by the least-squares GACV criterion
RSS / (n - tr(H))).  The fitted trend supports draws from its large-sample
normal approximation: mean B'(t) beta_hat and variance
(sigma2_hat / n) * B'(t) G_hat^{-1} B(t) with G_hat the average outer
product of basis vectors over observed years.

Stocks are normalized by a LOESS-smoothed estimate of the prior year's
national production, giving the dimensionless carryover measure the rest
of the pipeline conditions on.  Note the production column must be in the
same units as stocks (million bushels); a per-acre yield series needs an
acreage conversion first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bspline import (
    BSplineBasis,
    basis_matrix,
    bspline_basis,
    difference_matrix,
)

logger = logging.getLogger(__name__)

__all__ = [
    "TrendError",
    "TrendModel",
    "MarketSeries",
    "YieldPanel",
    "fit_trend",
    "penalized_ls",
    "ls_gacv_select",
    "detrend",
    "retrend",
    "draw_trend",
    "loess_smooth",
    "normalize_stocks",
    "rebase_price",
    "rebase_yield",
    "rebase_to_year",
]


class TrendError(ValueError):
    """Invalid trend-fitting or transformation request."""


@dataclass(frozen=True)
class MarketSeries:
    """National yearly market data.

    Units: prices $/bu, implied volatility as an annualized fraction,
    stocks and national production in million bushels, deflator
    dimensionless with the base year at 1.
    """

    year: np.ndarray
    harvest_price: np.ndarray
    feb_futures: np.ndarray
    implied_vol: np.ndarray
    stocks: np.ndarray
    national_production: np.ndarray
    gdp_deflator: np.ndarray

    def __post_init__(self):
        year = np.asarray(self.year, dtype=int)
        if year.size == 0:
            raise TrendError("market series is empty")
        if np.any(np.diff(year) <= 0):
            raise TrendError("years must be strictly increasing")
        object.__setattr__(self, "year", year)
        for name in (
            "harvest_price",
            "feb_futures",
            "implied_vol",
            "stocks",
            "national_production",
            "gdp_deflator",
        ):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != year.shape:
                raise TrendError(f"{name} length does not match years")
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
                raise TrendError(f"{name} must be finite and positive")
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.year.size

    def time_index(self, years=None) -> np.ndarray:
        """Year indices t = 1..T used by the trend basis."""
        years = self.year if years is None else np.asarray(years)
        return years - self.year[0] + 1


@dataclass(frozen=True)
class YieldPanel:
    """County-level yield observations with state labels."""

    year: np.ndarray
    state: np.ndarray
    county: np.ndarray
    value: np.ndarray  # bu/acre

    def __post_init__(self):
        year = np.asarray(self.year, dtype=int)
        state = np.asarray(self.state, dtype=object)
        county = np.asarray(self.county, dtype=object)
        value = np.asarray(self.value, dtype=float)
        if not (year.shape == state.shape == county.shape == value.shape):
            raise TrendError("panel columns differ in length")
        if year.size == 0:
            raise TrendError("yield panel is empty")
        if np.any(value < 0.0) or not np.all(np.isfinite(value)):
            raise TrendError("yields must be finite and nonnegative")
        keys = set()
        for t, s, c in zip(year, state, county):
            k = (int(t), s, c)
            if k in keys:
                raise TrendError(f"duplicate (year, state, county) record {k}")
            keys.add(k)
        for name, arr in (
            ("year", year), ("state", state), ("county", county), ("value", value)
        ):
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.year.size

    @property
    def states(self) -> list:
        return sorted(set(self.state.tolist()))

    def for_state(self, state) -> "YieldPanel":
        mask = self.state == state
        if not mask.any():
            raise TrendError(f"no records for state {state!r}")
        return YieldPanel(
            self.year[mask], self.state[mask], self.county[mask], self.value[mask]
        )

    def records_per_year(self) -> dict[int, int]:
        years, counts = np.unique(self.year, return_counts=True)
        return {int(t): int(c) for t, c in zip(years, counts)}


@dataclass(frozen=True)
class TrendModel:
    """Penalized-LS trend with the pieces needed for trend draws."""

    coefficients: np.ndarray
    basis: BSplineBasis
    lam: float
    sigma2_hat: float
    gram_hat: np.ndarray
    sample_count: int

    def fitted(self, t, clamp: bool = False) -> np.ndarray:
        rows = basis_matrix(self.basis, np.atleast_1d(t), clamp=clamp)
        out = rows @ self.coefficients
        return out if np.ndim(t) else float(out[0])

    def draw_variance(self, t, clamp: bool = False) -> np.ndarray:
        rows = basis_matrix(self.basis, np.atleast_1d(t), clamp=clamp)
        try:
            solved = np.linalg.solve(self.gram_hat, rows.T)
        except np.linalg.LinAlgError:
            logger.warning("gram matrix singular; using pseudo-inverse")
            solved = np.linalg.pinv(self.gram_hat) @ rows.T
        var = (self.sigma2_hat / self.sample_count) * np.einsum(
            "ij,ji->i", rows, solved
        )
        var = np.maximum(var, 0.0)
        return var if np.ndim(t) else float(var[0])


def ls_gacv_select(X, y, penalty_gram, lambda_grid) -> float:
    """Least-squares GACV: argmin RSS(lambda) / (n - tr(H)), smoother ties win."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    grid = np.asarray(lambda_grid, dtype=float)
    n = X.shape[0]
    A0 = X.T @ X
    Xty = X.T @ y
    yty = float(y @ y)
    criteria = np.full(grid.size, np.inf)
    skipped = []
    for gi, lam in enumerate(grid):
        A = A0 + lam * penalty_gram
        try:
            beta = np.linalg.solve(A, Xty)
            trh = float(np.trace(np.linalg.solve(A, A0)))
        except np.linalg.LinAlgError:
            skipped.append(lam)
            continue
        denom = n - trh
        if not np.isfinite(denom) or denom <= 1e-8 * n:
            skipped.append(lam)
            continue
        rss = yty - 2 * beta @ Xty + beta @ A0 @ beta
        criteria[gi] = rss / denom
    if not np.any(np.isfinite(criteria)):
        raise TrendError(
            "least-squares GACV degenerate on the whole grid; points: "
            + ", ".join(f"{v:g}" for v in skipped)
        )
    best = criteria.min()
    slack = best + 1e-12 * max(1.0, abs(best))
    idx = int(np.max(np.nonzero(criteria <= slack)[0]))
    return float(grid[idx])


def penalized_ls(X, y, penalty_gram, lam: float) -> np.ndarray:
    """(X'X + lam P)^{-1} X'y, with a clear error on singular systems."""
    A = np.asarray(X).T @ np.asarray(X) + lam * penalty_gram
    try:
        return np.linalg.solve(A, np.asarray(X).T @ np.asarray(y))
    except np.linalg.LinAlgError as exc:
        raise TrendError(
            f"normal equations singular at lambda={lam}; "
            "the design is collinear"
        ) from exc


def fit_trend(
    times,
    values,
    knot_spacing_years: int = 10,
    m: int = 2,
    degree: int = 3,
    lambda_grid: Optional[Sequence[float]] = None,
) -> TrendModel:
    """Penalized B-spline trend over year indices.

    ``times`` are year indices (1..T, duplicates allowed for pooled county
    panels); the basis lives on [0, T] with K_n = ceil(T / spacing) and
    equally spaced interior knots.  Residual variance uses the n - 1
    denominator; the gram matrix averages basis outer products over the
    distinct years only.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.shape != values.shape:
        raise TrendError("times and values differ in length")
    if not np.all(np.isfinite(values)):
        raise TrendError("values must be finite")
    distinct = np.unique(times)
    if distinct.size < 2:
        raise TrendError("need at least two distinct times")
    T = distinct.size
    K_n = max(1, int(np.ceil(T / knot_spacing_years)))
    support = (0.0, float(T))
    basis = bspline_basis(times, degree, K_n, support, placement="equally_spaced")
    X = basis_matrix(basis, times)
    p = basis.size
    penalty = difference_matrix(m, p).gram()
    if lambda_grid is None:
        lambda_grid = np.logspace(-4, 4, 25)
    lam = ls_gacv_select(X, values, penalty, lambda_grid)
    beta = penalized_ls(X, values, penalty, lam)
    resid = values - X @ beta
    n = values.size
    sigma2 = float(resid @ resid) / (n - 1)
    Bd = basis_matrix(basis, distinct)
    gram = (Bd.T @ Bd) / T
    return TrendModel(
        coefficients=beta,
        basis=basis,
        lam=float(lam),
        sigma2_hat=sigma2,
        gram_hat=gram,
        sample_count=int(n),
    )


def detrend(values, times, model: TrendModel, mode: str) -> np.ndarray:
    """p_tilde = log(p) - trend(t) for prices, y_tilde = y - trend(t) for yields."""
    values = np.asarray(values, dtype=float)
    fitted = np.atleast_1d(model.fitted(np.asarray(times, dtype=float)))
    if mode == "log_price":
        if np.any(values <= 0.0):
            raise TrendError("prices must be positive in log mode")
        return np.log(values) - fitted
    if mode == "level_yield":
        return values - fitted
    raise TrendError(f"unknown detrend mode {mode!r}")


def retrend(detrended, times, model: TrendModel, mode: str) -> np.ndarray:
    """Exact inverse of :func:`detrend`."""
    detrended = np.asarray(detrended, dtype=float)
    fitted = np.atleast_1d(model.fitted(np.asarray(times, dtype=float)))
    if mode == "log_price":
        return np.exp(detrended + fitted)
    if mode == "level_yield":
        return detrended + fitted
    raise TrendError(f"unknown retrend mode {mode!r}")


def draw_trend(model: TrendModel, t, rng, size: Optional[int] = None):
    """Draws from N(trend(t), (sigma2/n) B'(t) G^{-1} B(t))."""
    mean = model.fitted(t, clamp=True)
    var = model.draw_variance(t, clamp=True)
    if not np.all(np.isfinite(var)):
        raise TrendError(f"non-finite trend-draw variance at t={t}")
    sd = np.sqrt(var)
    if size is None:
        return mean + sd * rng.standard_normal()
    return mean + sd * rng.standard_normal(size)


def loess_smooth(x, y, span: float = 0.75, degree: int = 1, xq=None) -> np.ndarray:
    """Tricube-weighted local polynomial fit evaluated at query points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise TrendError("x and y must be 1-d and equally long")
    if not 0.0 < span <= 1.0:
        raise TrendError(f"span must be in (0, 1], got {span}")
    n = x.size
    k = max(degree + 2, int(np.ceil(span * n)))
    if n < degree + 2:
        raise TrendError(
            f"need at least {degree + 2} points for degree-{degree} loess"
        )
    k = min(k, n)
    xq = x if xq is None else np.atleast_1d(np.asarray(xq, dtype=float))
    out = np.empty(xq.size)
    for i, x0 in enumerate(xq):
        d = np.abs(x - x0)
        idx = np.argpartition(d, k - 1)[:k]
        dmax = d[idx].max()
        if dmax == 0.0:
            out[i] = float(np.mean(y[idx]))
            continue
        w = (1.0 - (d[idx] / dmax) ** 3) ** 3
        w = np.maximum(w, 0.0)
        if np.sum(w > 0) < degree + 1:
            w = w + 1e-12
        V = np.vander(x[idx] - x0, degree + 1, increasing=True)
        Vw = V * w[:, None]
        coef, *_ = np.linalg.lstsq(Vw.T @ V, Vw.T @ y[idx], rcond=None)
        out[i] = float(coef[0])
    return out


def normalize_stocks(series: MarketSeries, span: float = 0.75) -> np.ndarray:
    """s_tilde_t = stocks_t / smoothed production at year t-1.

    The first year has no prior-year observation; the smoother is
    evaluated at the boundary (its own year) instead, which is the closed
    extension of the query year t-1 clamped into the observed range.
    """
    years = series.year.astype(float)
    smooth_at = np.clip(years - 1.0, years[0], years[-1])
    xt = loess_smooth(years, series.national_production, span=span, xq=smooth_at)
    if np.any(xt <= 0.0):
        raise TrendError("smoothed production must be positive")
    return series.stocks / xt


def rebase_price(prices, deflator):
    """Deflate to base-year units: p / GDPDEF (deflator = 1 in the base year)."""
    prices = np.asarray(prices, dtype=float)
    deflator = np.asarray(deflator, dtype=float)
    if np.any(deflator <= 0.0):
        raise TrendError("deflator must be positive")
    return prices / deflator


def rebase_yield(yields, model: TrendModel, t_index, base_index):
    """y + trend(base) - trend(t); base index beyond the data clamps to the edge."""
    yields = np.asarray(yields, dtype=float)
    trend_t = model.fitted(np.atleast_1d(np.asarray(t_index, dtype=float)), clamp=True)
    trend_a = model.fitted(float(base_index), clamp=True)
    return yields + trend_a - trend_t


def rebase_to_year(prices, yields, yield_model: TrendModel, t_index, base_index, deflator):
    """Apply both base-year conversions; see rebase_price and rebase_yield."""
    return (
        rebase_price(prices, deflator),
        rebase_yield(yields, yield_model, t_index, base_index),
    )
