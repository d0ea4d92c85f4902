"""Revenue-insurance indemnities, channel models, premium simulation and
the cede/retain rating game.

Two pricing schemes share the harvest-price machinery and differ only in
the yield stage.  Stocks reach revenue through the spring futures level
(channel 1) and its implied volatility (channel 2): both are penalized
B-spline regressions on normalized stocks, and harvest price is drawn
lognormal around the drawn futures level with the drawn volatility as the
log-price standard deviation.  The three-channel scheme additionally lets
stocks move the yield distribution by evaluating the stock-conditioned
yield quantile model; the two-channel scheme evaluates the stock-free
yield model instead.

A note on scales: the futures mean equation is fit on log(feb_futures),
and the simulated volatility enters as the standard deviation of log
price, so it must live on the level scale (a log-volatility around -1.6
cannot serve as a lognormal sigma).  The default therefore fits the
volatility channel in levels, keeping the residual-variance formula and
the price step coherent; ``iv_log_scale=True`` switches to a fully
log-scale channel whose draws are exponentiated before use, for users who
prefer multiplicative volatility errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Optional

import numpy as np

from .bspline import basis_matrix, bspline_basis, difference_matrix
from .joint_sampler import ConditionalJointModel
from .trend import MarketSeries, TrendModel, draw_trend, ls_gacv_select, penalized_ls

__all__ = [
    "PremiumError",
    "PremiumConfig",
    "StockChannelModel",
    "PremiumResult",
    "RatingGameResult",
    "indemnity",
    "fit_stock_channels",
    "simulate_premium",
    "loss_ratio",
    "rating_game",
    "binomial_upper_tail",
]


class PremiumError(ValueError):
    """Invalid premium computation request."""


@dataclass(frozen=True)
class PremiumConfig:
    """Policy terms: coverage fraction and the APH yield guarantee base."""

    coverage: float  # psi in (0, 1]
    aph_yield: float  # trailing mean yield, bu/acre
    spring_futures: Optional[float] = None  # observed futures, for reference
    base_year: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.coverage <= 1.0:
            raise PremiumError(f"coverage must be in (0, 1], got {self.coverage}")
        if self.aph_yield <= 0.0:
            raise PremiumError(f"APH yield must be positive, got {self.aph_yield}")


@dataclass(frozen=True)
class StockChannelModel:
    """Futures and implied-volatility regressions on normalized stocks."""

    futures_fit: TrendModel  # response log(feb_futures)
    iv_fit: TrendModel  # response implied_vol (levels; see module note)
    iv_log_scale: bool = False

    def futures_log_mean(self, s_til) -> float:
        return self.futures_fit.fitted(s_til, clamp=True)

    def iv_mean(self, s_til) -> float:
        return self.iv_fit.fitted(s_til, clamp=True)


@dataclass(frozen=True)
class PremiumResult:
    premium: float
    model_kind: str
    iv_floor_count: int
    price_clamp_count: int
    yield_floor_count: int
    draws: int


@dataclass(frozen=True)
class RatingGameResult:
    """Per-year cede/retain index values and the exact binomial test."""

    years: np.ndarray
    d_values: np.ndarray  # NaN where undefined
    d_star: int
    effective_years: int
    excluded_years: int
    p_value: float


def indemnity(psi, pbar, ybar, p, y):
    """max(psi * pbar * ybar - p * y, 0) in $/acre."""
    psi, pbar, ybar = float(psi), np.asarray(pbar, float), np.asarray(ybar, float)
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if psi <= 0.0 or np.any(pbar <= 0.0) or np.any(ybar <= 0.0) or np.any(p <= 0.0):
        raise PremiumError("coverage, prices and APH yield must be positive")
    if np.any(y < 0.0):
        raise PremiumError("yields must be nonnegative")
    out = np.maximum(psi * pbar * ybar - p * y, 0.0)
    return out if out.ndim else float(out)


def fit_stock_channels(
    series: MarketSeries,
    stocks_normalized,
    degree: int = 3,
    interior_knot_count: int = 4,
    support: Optional[tuple[float, float]] = None,
    lambda_grid=None,
    iv_log_scale: bool = False,
) -> StockChannelModel:
    """Penalized LS of log futures and implied volatility on B(s_tilde)."""
    s_til = np.asarray(stocks_normalized, dtype=float)
    if s_til.shape != series.year.shape:
        raise PremiumError("normalized stocks length does not match the series")
    T = s_til.size
    if support is None:
        lo, hi = float(s_til.min()), float(s_til.max())
        pad = 0.05 * (hi - lo) or 0.05
        support = (lo - pad, hi + pad)
    basis = bspline_basis(s_til, degree, interior_knot_count, support)
    X = basis_matrix(basis, s_til, clamp=True)
    if T < X.shape[1]:
        raise PremiumError(
            f"need at least {X.shape[1]} years for the channel fits, got {T}"
        )
    penalty = difference_matrix(2, X.shape[1]).gram()
    if lambda_grid is None:
        lambda_grid = np.logspace(-4, 4, 25)
    gram = (X.T @ X) / T

    def channel(response):
        lam = ls_gacv_select(X, response, penalty, lambda_grid)
        beta = penalized_ls(X, response, penalty, lam)
        resid = response - X @ beta
        sigma2 = float(resid @ resid) / (T - 1)
        return TrendModel(
            coefficients=beta,
            basis=basis,
            lam=lam,
            sigma2_hat=sigma2,
            gram_hat=gram,
            sample_count=T,
        )

    futures_fit = channel(np.log(series.feb_futures))
    iv_response = np.log(series.implied_vol) if iv_log_scale else series.implied_vol
    iv_fit = channel(iv_response)
    return StockChannelModel(
        futures_fit=futures_fit, iv_fit=iv_fit, iv_log_scale=iv_log_scale
    )


def simulate_premium(
    model_kind: str,
    joint_model: ConditionalJointModel,
    channels: StockChannelModel,
    price_trend: TrendModel,
    yield_trend: TrendModel,
    config: PremiumConfig,
    s_til: float,
    t_index: float,
    R: int,
    rng,
    iv_floor: float = 1e-4,
    vol_scale: float = 1.0,
) -> PremiumResult:
    """Monte Carlo premium under the two- or three-channel scheme.

    Per draw: futures level lognormal from the stocks channel, volatility
    normal from the stocks channel (floored at a small positive value,
    floor events counted), harvest price lognormal around the drawn
    futures with the drawn volatility (times ``vol_scale``) as log-price
    sd, detrended by a price-trend draw, pushed through the yield quantile
    model, retrended by a yield-trend draw.  The premium is the mean
    indemnity over draws with the drawn futures in the guarantee.
    """
    if R < 1:
        raise PremiumError(f"R must be >= 1, got {R}")
    if model_kind == "three_channel":
        if not joint_model.conditions_on_stocks:
            raise PremiumError("three-channel pricing needs a stock-conditioned model")
    elif model_kind == "two_channel":
        if joint_model.conditions_on_stocks:
            raise PremiumError("two-channel pricing needs the stock-free yield model")
    else:
        raise PremiumError(f"unknown model kind {model_kind!r}")

    lo, hi = joint_model.tau_clamp
    tau_y = lo + (hi - lo) * rng.random(R)
    log_pbar = channels.futures_log_mean(s_til) + np.sqrt(
        channels.futures_fit.sigma2_hat
    ) * rng.standard_normal(R)
    pbar_plus = np.exp(log_pbar)

    iv_draw = channels.iv_mean(s_til) + np.sqrt(
        channels.iv_fit.sigma2_hat
    ) * rng.standard_normal(R)
    if channels.iv_log_scale:
        iv_plus = np.exp(iv_draw)
        iv_floor_count = 0
    else:
        iv_floor_count = int(np.sum(iv_draw < iv_floor))
        iv_plus = np.maximum(iv_draw, iv_floor)

    log_p_plus = log_pbar + iv_plus * vol_scale * rng.standard_normal(R)
    p_plus = np.exp(log_p_plus)

    p_hat = draw_trend(price_trend, float(t_index), rng, size=R)
    p_til_plus = log_p_plus - p_hat
    plo, phi = joint_model.price_support
    price_clamp_count = int(np.sum((p_til_plus < plo) | (p_til_plus > phi)))
    p_til_plus = np.clip(p_til_plus, plo, phi)

    y_til_plus = joint_model.yield_quantile(
        tau_y, p_til_plus, s_til if model_kind == "three_channel" else None
    )
    y_hat = draw_trend(yield_trend, float(t_index), rng, size=R)
    y_plus = y_hat + y_til_plus
    yield_floor_count = int(np.sum(y_plus < 0.0))
    y_plus = np.maximum(y_plus, 0.0)

    payouts = np.maximum(
        config.coverage * pbar_plus * config.aph_yield - p_plus * y_plus, 0.0
    )
    return PremiumResult(
        premium=float(payouts.mean()),
        model_kind=model_kind,
        iv_floor_count=iv_floor_count,
        price_clamp_count=price_clamp_count,
        yield_floor_count=yield_floor_count,
        draws=R,
    )


def loss_ratio(indemnities, premiums) -> float:
    """Total realized indemnities over total premiums."""
    ind = np.asarray(indemnities, dtype=float)
    prem = np.asarray(premiums, dtype=float)
    total = float(prem.sum())
    if total <= 0.0:
        raise PremiumError("total premium must be positive")
    return float(ind.sum()) / total


def binomial_upper_tail(T: int, k: int) -> float:
    """P(X >= k) for X ~ Binomial(T, 1/2), exact integer arithmetic."""
    if T < 0:
        raise PremiumError(f"T must be nonnegative, got {T}")
    k = max(0, min(k, T + 1))
    total = sum(comb(T, i) for i in range(k, T + 1))
    return total / 2**T


def rating_game(
    years,
    indemnities,
    premiums_three_channel,
    premiums_two_channel,
    proposed: str = "three_channel",
) -> RatingGameResult:
    """Cede/retain comparison of the two premium schemes.

    Each scheme plays the private company against the other as the
    reference rate-maker: policies with a higher own rate are ceded, ties
    and lower rates are retained, and both buckets' loss ratios are taken
    at the reference premiums (the reference holds the book).  The yearly
    index divides the proposed scheme's cede/retain ratio by the
    reference scheme's ratio from the swapped game; years where either
    game has an empty bucket or a zero-premium bucket are excluded.  The
    test statistic counts years with index > 1 against an exact
    Binomial(T, 1/2) upper tail.
    """
    years = np.asarray(years)
    ind = np.asarray(indemnities, dtype=float)
    p3 = np.asarray(premiums_three_channel, dtype=float)
    p2 = np.asarray(premiums_two_channel, dtype=float)
    if not (years.shape == ind.shape == p3.shape == p2.shape):
        raise PremiumError("rating game inputs differ in length")
    if proposed == "three_channel":
        prop, ref = p3, p2
    elif proposed == "two_channel":
        prop, ref = p2, p3
    else:
        raise PremiumError(f"unknown proposed scheme {proposed!r}")

    uniq = np.unique(years)
    d_values = np.full(uniq.size, np.nan)

    def bucket_ratio(ind_y, own, other):
        """Cede/retain loss-ratio ratio with `other` as the reference."""
        cede = own > other
        retain = ~cede  # ties retained
        if not cede.any() or not retain.any():
            return None
        num_prem = other[cede].sum()
        den_prem = other[retain].sum()
        if num_prem <= 0.0 or den_prem <= 0.0:
            return None
        lr_c = ind_y[cede].sum() / num_prem
        lr_r = ind_y[retain].sum() / den_prem
        if lr_r == 0.0:
            return None
        return lr_c / lr_r

    for i, t in enumerate(uniq):
        sel = years == t
        if np.array_equal(prop[sel], ref[sel]):
            # Methods agree exactly: no adverse-selection signal either way.
            d_values[i] = 1.0
            continue
        r_prop = bucket_ratio(ind[sel], prop[sel], ref[sel])
        r_ref = bucket_ratio(ind[sel], ref[sel], prop[sel])
        if r_prop is None or r_ref is None or r_ref == 0.0:
            continue
        d_values[i] = r_prop / r_ref

    defined = np.isfinite(d_values)
    T_eff = int(defined.sum())
    excluded = int(uniq.size - T_eff)
    d_star = int(np.sum(d_values[defined] > 1.0))
    p_value = binomial_upper_tail(T_eff, d_star) if T_eff else 1.0
    return RatingGameResult(
        years=uniq,
        d_values=d_values,
        d_star=d_star,
        effective_years=T_eff,
        excluded_years=excluded,
        p_value=p_value,
    )
