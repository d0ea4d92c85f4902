"""Conditional joint price/yield model and inverse-transform sampling.

The model is a grid of penalized quantile fits: detrended log price given
normalized stocks, and detrended yield given (detrended price, stocks).
Draws follow the two-stage inverse transform: tau_p and tau_y are sampled
uniformly on a clamped interval, the price quantile function gives
p_tilde*, and the yield quantile function evaluated at (p_tilde*, s_tilde)
gives y_tilde*.  Quantile curves are monotone-rearranged (pointwise sort
across the tau grid) before interpolation, so every draw comes from a
valid distribution even when raw fits cross.

The unconditional variant drops stocks: the price quantile becomes the
scalar sample quantile of the detrended price series and the yield fits
condition on detrended price only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .bspline import bspline_basis, difference_matrix
from .quantile_fit import DesignSpec, fit_pqr_grid, gacv_select
from .quantile_fit import default_lambda_grid
from .trend import TrendModel, draw_trend, rebase_price, rebase_yield

logger = logging.getLogger(__name__)

__all__ = [
    "SamplerError",
    "ConditionalJointModel",
    "JointDraws",
    "default_tau_grid",
    "fit_conditional",
    "fit_unconditional",
    "sample_conditional",
    "sample_unconditional",
    "retrend_and_rebase",
]

DEFAULT_TAU_CLAMP = (0.001, 0.999)
GACV_TAU_SUBSET = (0.1, 0.25, 0.5, 0.75, 0.9)


class SamplerError(RuntimeError):
    """Invalid sampling request or model construction."""


def default_tau_grid() -> np.ndarray:
    """99 quantile levels, 0.01 through 0.99."""
    return np.round(np.arange(1, 100) / 100.0, 2)


@dataclass(frozen=True)
class ConditionalJointModel:
    """Quantile-grid representation of g(p_tilde | s) and g(y_tilde | p, s).

    ``price_coefs`` holds one coefficient column per tau for the price
    stage (or, when ``conditions_on_stocks`` is False, the scalar sample
    quantiles directly).  ``yield_coefs`` is (ncols, ntau) on the
    concatenated (price[, stocks]) basis.
    """

    tau_grid: np.ndarray
    yield_spec: DesignSpec
    yield_coefs: np.ndarray
    price_support: tuple[float, float]
    conditions_on_stocks: bool
    stock_support: Optional[tuple[float, float]] = None
    price_spec: Optional[DesignSpec] = None
    price_coefs: Optional[np.ndarray] = None  # (ncols, ntau) spline coefs
    price_scalar_quantiles: Optional[np.ndarray] = None  # unconditional path
    tau_clamp: tuple[float, float] = DEFAULT_TAU_CLAMP
    rearrange: bool = True
    price_lambda: float = 0.0
    yield_lambda: float = 0.0
    price_lattice_size: int = 101

    def __post_init__(self):
        tau = np.asarray(self.tau_grid, dtype=float)
        if np.any(np.diff(tau) <= 0):
            raise SamplerError("tau grid must be strictly increasing")
        object.__setattr__(self, "tau_grid", tau)

    def price_quantile_curve(self, s_til: Optional[float] = None) -> np.ndarray:
        """Rearranged price quantile values over the tau grid."""
        if self.conditions_on_stocks:
            if s_til is None:
                raise SamplerError("conditional model needs a stock level")
            row = self.price_spec.row([s_til])
            curve = self.price_coefs.T @ row
        else:
            curve = np.array(self.price_scalar_quantiles, dtype=float)
        return np.sort(curve) if self.rearrange else curve

    def yield_quantile_lattice(self, s_til: Optional[float], lattice) -> np.ndarray:
        """(ntau, nlat) rearranged yield quantiles over a price lattice."""
        lattice = np.asarray(lattice, dtype=float)
        if self.conditions_on_stocks:
            cols = [lattice, np.full(lattice.size, float(s_til))]
        else:
            cols = [lattice]
        design = self.yield_spec.matrix(cols, clamp=True)
        Q = (design @ self.yield_coefs).T
        return np.sort(Q, axis=0) if self.rearrange else Q

    def _price_lattice(self) -> np.ndarray:
        lo, hi = self.price_support
        return np.linspace(lo, hi, self.price_lattice_size)

    def yield_quantile(self, tau_y, p_til, s_til: Optional[float]):
        """Bilinear interpolation of the rearranged yield quantile surface.

        Price inputs outside the price support are clamped; callers that
        need the clamp count should pre-clip and count themselves.
        """
        tau_y = np.atleast_1d(np.asarray(tau_y, dtype=float))
        p_til = np.atleast_1d(np.asarray(p_til, dtype=float))
        lat = self._price_lattice()
        Q = self.yield_quantile_lattice(s_til, lat)
        p = np.clip(p_til, lat[0], lat[-1])
        j = np.clip(np.searchsorted(lat, p, side="right") - 1, 0, lat.size - 2)
        wj = (p - lat[j]) / (lat[j + 1] - lat[j])
        tau = np.clip(tau_y, self.tau_grid[0], self.tau_grid[-1])
        i = np.clip(
            np.searchsorted(self.tau_grid, tau, side="right") - 1,
            0,
            self.tau_grid.size - 2,
        )
        wi = (tau - self.tau_grid[i]) / (self.tau_grid[i + 1] - self.tau_grid[i])
        v = (
            Q[i, j] * (1 - wi) * (1 - wj)
            + Q[i, j + 1] * (1 - wi) * wj
            + Q[i + 1, j] * wi * (1 - wj)
            + Q[i + 1, j + 1] * wi * wj
        )
        return v

    def price_quantile(self, tau_p, s_til: Optional[float] = None):
        """Monotone interpolation of the price quantile curve in tau."""
        curve = self.price_quantile_curve(s_til)
        return np.interp(np.asarray(tau_p, dtype=float), self.tau_grid, curve)

    def price_cdf(self, x, s_til: Optional[float] = None, left: bool = False) -> np.ndarray:
        """CDF implied by the sampler at this stock level.

        Exact inverse of the draw mechanism: tau uniform on the clamp
        interval pushed through the interpolated quantile curve.  The law
        carries atoms at the curve endpoints (tau draws beyond the grid
        take the endpoint value), so ``left=True`` returns the left limit
        P(draw < x), which a correct KS comparison needs at the atoms.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        curve = self.price_quantile_curve(s_til)
        tau = self.tau_grid
        lo, hi = self.tau_clamp
        # side="left" yields the strict inequality (left limit): searchsorted
        # then lands at the start of any flat run, and x equal to the top
        # atom value resolves through the interpolation branch.
        j = np.searchsorted(curve, x, side="left" if left else "right") - 1
        tau_x = np.empty(x.size)
        below = j < 0
        above = j >= curve.size - 1
        mid = ~(below | above)
        tau_x[below] = 0.0
        tau_x[above] = 1.0
        jm = j[mid]
        denom = curve[jm + 1] - curve[jm]
        frac = np.where(denom > 0, (x[mid] - curve[jm]) / np.where(denom > 0, denom, 1.0), 0.0)
        tau_x[mid] = tau[jm] + frac * (tau[jm + 1] - tau[jm])
        return np.clip((tau_x - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True)
class JointDraws:
    """Inverse-transform draws, detrended scale plus optional rebased scale."""

    price_detrended: np.ndarray
    yield_detrended: np.ndarray
    tau_price: np.ndarray
    tau_yield: np.ndarray
    s_til: Optional[float]
    clamp_count: int = 0
    seed_info: Optional[dict] = None
    price_rebased: Optional[np.ndarray] = None
    yield_rebased: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.price_detrended.size

    @property
    def clamp_fraction(self) -> float:
        return self.clamp_count / max(1, len(self))


def _support(values, expand: float = 0.05) -> tuple[float, float]:
    lo, hi = float(np.min(values)), float(np.max(values))
    pad = (hi - lo) * expand
    if pad == 0.0:
        pad = max(abs(lo), 1.0) * expand
    return lo - pad, hi + pad


def _clip_into(values, support, label: str) -> np.ndarray:
    lo, hi = support
    outside = int(np.sum((values < lo) | (values > hi)))
    if outside:
        logger.info(
            "clipping %d %s observations into the support [%g, %g]",
            outside, label, lo, hi,
        )
    return np.clip(values, lo, hi)


def fit_conditional(
    price_detrended,
    stocks,
    yield_detrended,
    yield_year_index,
    tau_grid=None,
    degree: int = 3,
    interior_knot_count: int = 4,
    price_support: Optional[tuple[float, float]] = None,
    stock_support: Optional[tuple[float, float]] = None,
    lambda_grid=None,
    gacv_tau_subset: Sequence[float] = GACV_TAU_SUBSET,
    tau_clamp: tuple[float, float] = DEFAULT_TAU_CLAMP,
    penalty_order: int = 2,
    solver_rel_tol: float = 1e-8,
) -> ConditionalJointModel:
    """Fit the stock-conditioned joint model on detrended data.

    ``yield_year_index`` maps each county-year yield record to its row in
    the ``price_detrended``/``stocks`` series.  One smoothing parameter
    per stage is chosen by GACV over ``gacv_tau_subset`` and shared by
    every tau in the grid; fits for the whole grid run in one batched
    solver sweep at production tolerance (statistical error dominates well
    before 1e-8 relative objectives).
    """
    p_til = np.asarray(price_detrended, dtype=float)
    s_til = np.asarray(stocks, dtype=float)
    y_til = np.asarray(yield_detrended, dtype=float)
    year_ix = np.asarray(yield_year_index, dtype=int)
    if p_til.shape != s_til.shape:
        raise SamplerError("price and stock series differ in length")
    if y_til.shape != year_ix.shape:
        raise SamplerError("yield records and year indices differ in length")
    if year_ix.min() < 0 or year_ix.max() >= p_til.size:
        raise SamplerError("year indices outside the series range")
    tau_grid = default_tau_grid() if tau_grid is None else np.asarray(tau_grid, float)
    lo, hi = tau_clamp
    if not (0.0 < lo < hi < 1.0):
        raise SamplerError(f"invalid tau clamp {tau_clamp}")
    if tau_grid.min() < lo or tau_grid.max() > hi:
        raise SamplerError("tau grid must lie inside the clamp interval")
    if lambda_grid is None:
        lambda_grid = default_lambda_grid()

    price_support = price_support or _support(p_til)
    stock_support = stock_support or _support(s_til)
    # Declared supports may be tighter than simulated tails (the price
    # support is a plausibility range); covariates clip into them for knot
    # placement and design evaluation.
    s_clip = _clip_into(s_til, stock_support, "stocks")
    p_clip = _clip_into(p_til, price_support, "detrended price")

    stock_basis = bspline_basis(
        s_clip, degree, interior_knot_count, stock_support
    )
    price_spec = DesignSpec(bases=(stock_basis,))
    Xp = price_spec.matrix([s_clip])
    Dp = difference_matrix(penalty_order, Xp.shape[1])
    lam_p = gacv_select(Xp, p_til, gacv_tau_subset, Dp, lambda_grid)
    price_grid = fit_pqr_grid(
        Xp, p_til, tau_grid, lam_p, Dp, design_spec=price_spec,
        rel_tol=solver_rel_tol,
    )

    rec_p = p_clip[year_ix]
    rec_s = s_clip[year_ix]
    price_basis = bspline_basis(rec_p, degree, interior_knot_count, price_support)
    stock_basis_y = bspline_basis(rec_s, degree, interior_knot_count, stock_support)
    yield_spec = DesignSpec(bases=(price_basis, stock_basis_y))
    Xy = yield_spec.matrix([rec_p, rec_s])
    Dy = difference_matrix(penalty_order, Xy.shape[1])
    lam_y = gacv_select(Xy, y_til, gacv_tau_subset, Dy, lambda_grid)
    yield_grid = fit_pqr_grid(
        Xy, y_til, tau_grid, lam_y, Dy, design_spec=yield_spec,
        rel_tol=solver_rel_tol,
    )

    return ConditionalJointModel(
        tau_grid=tau_grid,
        yield_spec=yield_spec,
        yield_coefs=yield_grid.coefficients,
        price_support=price_support,
        stock_support=stock_support,
        conditions_on_stocks=True,
        price_spec=price_spec,
        price_coefs=price_grid.coefficients,
        tau_clamp=tau_clamp,
        price_lambda=lam_p,
        yield_lambda=lam_y,
    )


def fit_unconditional(
    price_detrended,
    yield_detrended,
    yield_year_index,
    tau_grid=None,
    degree: int = 3,
    interior_knot_count: int = 4,
    price_support: Optional[tuple[float, float]] = None,
    lambda_grid=None,
    gacv_tau_subset: Sequence[float] = GACV_TAU_SUBSET,
    tau_clamp: tuple[float, float] = DEFAULT_TAU_CLAMP,
    penalty_order: int = 2,
    solver_rel_tol: float = 1e-8,
) -> ConditionalJointModel:
    """Stock-free variant: scalar price quantiles, yield given price only.

    The scalar price quantile at each tau is the sample quantile under the
    check-loss minimizer convention (midpoint of the argmin interval when
    n*tau is integral), so no smoothing parameter enters the price stage.
    """
    p_til = np.asarray(price_detrended, dtype=float)
    y_til = np.asarray(yield_detrended, dtype=float)
    year_ix = np.asarray(yield_year_index, dtype=int)
    if y_til.shape != year_ix.shape:
        raise SamplerError("yield records and year indices differ in length")
    if year_ix.min() < 0 or year_ix.max() >= p_til.size:
        raise SamplerError("year indices outside the series range")
    tau_grid = default_tau_grid() if tau_grid is None else np.asarray(tau_grid, float)
    if lambda_grid is None:
        lambda_grid = default_lambda_grid()
    price_support = price_support or _support(p_til)

    scalar_q = np.quantile(p_til, tau_grid, method="averaged_inverted_cdf")

    rec_p = _clip_into(p_til, price_support, "detrended price")[year_ix]
    price_basis = bspline_basis(rec_p, degree, interior_knot_count, price_support)
    yield_spec = DesignSpec(bases=(price_basis,))
    Xy = yield_spec.matrix([rec_p])
    Dy = difference_matrix(penalty_order, Xy.shape[1])
    lam_y = gacv_select(Xy, y_til, gacv_tau_subset, Dy, lambda_grid)
    yield_grid = fit_pqr_grid(
        Xy, y_til, tau_grid, lam_y, Dy, design_spec=yield_spec,
        rel_tol=solver_rel_tol,
    )

    return ConditionalJointModel(
        tau_grid=tau_grid,
        yield_spec=yield_spec,
        yield_coefs=yield_grid.coefficients,
        price_support=price_support,
        conditions_on_stocks=False,
        price_scalar_quantiles=scalar_q,
        tau_clamp=tau_clamp,
        yield_lambda=lam_y,
    )


def _draw_taus(n, clamp, rng):
    lo, hi = clamp
    return lo + (hi - lo) * rng.random(n)


def sample_conditional(
    model: ConditionalJointModel,
    s_til: float,
    R: int,
    rng,
    seed_info: Optional[dict] = None,
) -> JointDraws:
    """R inverse-transform draws of (p_tilde*, y_tilde*) at one stock level."""
    if R <= 0:
        raise SamplerError(f"R must be positive, got {R}")
    if model.conditions_on_stocks:
        lo, hi = model.stock_support
        if not lo <= s_til <= hi:
            raise SamplerError(
                f"stock level {s_til} outside the model support [{lo}, {hi}]"
            )
    tau_p = _draw_taus(R, model.tau_clamp, rng)
    tau_y = _draw_taus(R, model.tau_clamp, rng)
    p_star = model.price_quantile(tau_p, s_til)
    plo, phi = model.price_support
    clamp_count = int(np.sum((p_star < plo) | (p_star > phi)))
    if clamp_count:
        logger.info(
            "clamped %d of %d price draws into the price support", clamp_count, R
        )
    y_star = model.yield_quantile(tau_y, np.clip(p_star, plo, phi), s_til)
    return JointDraws(
        price_detrended=p_star,
        yield_detrended=y_star,
        tau_price=tau_p,
        tau_yield=tau_y,
        s_til=float(s_til) if model.conditions_on_stocks else None,
        clamp_count=clamp_count,
        seed_info=seed_info,
    )


def sample_unconditional(
    model: ConditionalJointModel, R: int, rng, seed_info: Optional[dict] = None
) -> JointDraws:
    """Draws from the stock-free joint model."""
    if model.conditions_on_stocks:
        raise SamplerError("model conditions on stocks; use sample_conditional")
    return sample_conditional(model, np.nan, R, rng, seed_info=seed_info)


def retrend_and_rebase(
    draws: JointDraws,
    price_trend: TrendModel,
    yield_trend: TrendModel,
    t_index: float,
    base_index: float,
    deflator_t: float,
    rng,
) -> JointDraws:
    """Complete draws to base-year units via independent trend draws.

    Per draw r: p* = exp(price-trend draw + p_tilde*), y* = yield-trend
    draw + y_tilde*, then the base-year conversion divides prices by the
    year-t deflator (normalized so the base year is 1) and shifts yields
    by the fitted-trend difference between base year and year t.
    """
    R = len(draws)
    p_hat = draw_trend(price_trend, float(t_index), rng, size=R)
    y_hat = draw_trend(yield_trend, float(t_index), rng, size=R)
    p_star = np.exp(p_hat + draws.price_detrended)
    y_star = y_hat + draws.yield_detrended
    p_base = rebase_price(p_star, deflator_t)
    y_base = rebase_yield(y_star, yield_trend, float(t_index), float(base_index))
    return replace(draws, price_rebased=p_base, yield_rebased=y_base)
