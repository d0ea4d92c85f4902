"""Synthetic validation harness: known joint distributions, skew-normal
errors, and scoring of the fitted sampler by quantile recovery and by mean
integrated squared error of a kernel density estimate against the truth.

The data-generating process draws stocks from Beta(7, 44), detrended log
price from a location-scale skew-normal in stocks (linear or nonlinear
mean/scale), and detrended yield from a nonlinear function of price and
stocks with constant scale 33 and left-skewed errors.  Error terms are
standardized skew-normals: location -(1 - 2 d^2/pi)^{-1/2} d sqrt(2/pi)
and scale (1 - 2 d^2/pi)^{-1/2} with d = alpha / sqrt(1 + alpha^2), which
makes them mean zero, variance one, with the sign of alpha setting the
skew direction.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import owens_t
from scipy.stats import norm

from .joint_sampler import fit_conditional, sample_conditional
from .bspline import bspline_basis, difference_matrix
from .quantile_fit import DesignSpec, fit_pqr_grid, gacv_select, default_lambda_grid

logger = logging.getLogger(__name__)

__all__ = [
    "SimError",
    "SimConfig",
    "DensityGrid",
    "sn_params",
    "skew_normal_draw",
    "sn_pdf",
    "sn_cdf",
    "sn_quantile",
    "mu_price",
    "sigma_price",
    "mu_yield",
    "sigma_yield",
    "generate_panel",
    "true_quantile_price",
    "true_quantile_yield",
    "true_joint_density",
    "kde2d",
    "mise",
    "run_price_study",
    "run_joint_study",
]

ALPHA_PRICE = 3.0
ALPHA_YIELD = -3.0
STOCK_BETA = (7.0, 44.0)
EVAL_STOCKS = (0.093, 0.173, 0.281)
TAU_LEVELS = (0.1, 0.25, 0.5, 0.75, 0.9)


class SimError(ValueError):
    """Invalid simulation-study request."""


@dataclass(frozen=True)
class SimConfig:
    """Scale and mode switches for the synthetic study."""

    T: int = 100
    n_t: int = 500
    M: int = 100
    R: int = 1000
    price_mode: str = "linear"
    seed: int = 20250811
    eval_stocks: tuple = EVAL_STOCKS
    tau_levels: tuple = TAU_LEVELS
    kde_grid_size: int = 25
    stock_grid_size: int = 50

    def __post_init__(self):
        if self.price_mode not in ("linear", "nonlinear"):
            raise SimError(f"unknown price mode {self.price_mode!r}")
        for name in ("T", "n_t", "M", "R"):
            if getattr(self, name) < 1:
                raise SimError(f"{name} must be positive")


@dataclass(frozen=True)
class DensityGrid:
    """2-d density estimate on an (yield, price) grid."""

    yield_grid: np.ndarray
    price_grid: np.ndarray
    density: np.ndarray  # (ny, np)
    bandwidths: tuple[float, float]

    def riemann_mass(self) -> float:
        dy = self.yield_grid[1] - self.yield_grid[0]
        dp = self.price_grid[1] - self.price_grid[0]
        return float(self.density.sum() * dy * dp)


# --- skew-normal pieces -----------------------------------------------------

def sn_params(alpha: float) -> tuple[float, float]:
    """Location and scale standardizing SN(alpha) to mean 0, variance 1."""
    d = alpha / np.sqrt(1.0 + alpha * alpha)
    scale = (1.0 - 2.0 * d * d / np.pi) ** -0.5
    loc = -scale * d * np.sqrt(2.0 / np.pi)
    return float(loc), float(scale)


def skew_normal_draw(alpha: float, rng, size=None):
    """Standardized skew-normal draws via the two-normal construction.

    Z = d |U0| + sqrt(1 - d^2) U1 is SN(0, 1, alpha); the affine map with
    the standardizing location/scale gives mean 0 and unit variance.
    """
    d = alpha / np.sqrt(1.0 + alpha * alpha)
    u0 = rng.standard_normal(size)
    u1 = rng.standard_normal(size)
    z = d * np.abs(u0) + np.sqrt(1.0 - d * d) * u1
    loc, scale = sn_params(alpha)
    return loc + scale * z


def sn_pdf(x, alpha: float):
    """Density of the standardized skew-normal."""
    loc, scale = sn_params(alpha)
    z = (np.asarray(x, dtype=float) - loc) / scale
    return 2.0 / scale * norm.pdf(z) * norm.cdf(alpha * z)


def sn_cdf(x, alpha: float):
    """CDF via Owen's T: Phi(z) - 2 T(z, alpha)."""
    loc, scale = sn_params(alpha)
    z = (np.asarray(x, dtype=float) - loc) / scale
    return norm.cdf(z) - 2.0 * owens_t(z, alpha)


def sn_quantile(tau, alpha: float):
    """Quantile of the standardized skew-normal by bisection to 1e-10."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if np.any(tau <= 0.0) or np.any(tau >= 1.0):
        raise SimError("quantile levels must lie in (0, 1)")
    lo = np.full(tau.shape, -13.0)
    hi = np.full(tau.shape, 13.0)
    for _ in range(60):  # 26 / 2^60 << 1e-10
        mid = 0.5 * (lo + hi)
        below = sn_cdf(mid, alpha) < tau
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out = 0.5 * (lo + hi)
    return out if out.shape != (1,) else float(out[0])


# --- data-generating process -------------------------------------------------

def mu_price(s, mode: str):
    s = np.asarray(s, dtype=float)
    if mode == "linear":
        return 0.2 - 0.4 * s
    if mode == "nonlinear":
        return -0.2 + 0.4 * np.exp(-2.0 * s)
    raise SimError(f"unknown price mode {mode!r}")


def sigma_price(s, mode: str):
    s = np.asarray(s, dtype=float)
    if mode == "linear":
        return 0.5 - 0.5 * s
    if mode == "nonlinear":
        return 0.5 * np.exp(-2.0 * s)
    raise SimError(f"unknown price mode {mode!r}")


def mu_yield(p, s):
    p = np.asarray(p, dtype=float)
    s = np.asarray(s, dtype=float)
    return -25.0 + 14.45 * np.exp(p) + 22.18 * s


def sigma_yield(p, s):
    return np.broadcast_to(33.0, np.broadcast_shapes(np.shape(p), np.shape(s))).copy()


def generate_panel(config: SimConfig, rng):
    """One synthetic panel: stocks, detrended price, county yields.

    Returns (stocks (T,), price (T,), yields (T * n_t,), year_index).
    """
    a, b = STOCK_BETA
    s = rng.beta(a, b, config.T)
    eps_p = skew_normal_draw(ALPHA_PRICE, rng, config.T)
    p = mu_price(s, config.price_mode) + sigma_price(s, config.price_mode) * eps_p
    year_ix = np.repeat(np.arange(config.T), config.n_t)
    eps_y = skew_normal_draw(ALPHA_YIELD, rng, config.T * config.n_t)
    y = mu_yield(p[year_ix], s[year_ix]) + sigma_yield(p[year_ix], s[year_ix]) * eps_y
    return s, p, y, year_ix


def true_quantile_price(tau, s, mode: str):
    """Location-scale transform of the standardized SN quantile."""
    q = sn_quantile(tau, ALPHA_PRICE)
    return mu_price(s, mode) + sigma_price(s, mode) * q


def true_quantile_yield(tau, p, s):
    q = sn_quantile(tau, ALPHA_YIELD)
    return mu_yield(p, s) + sigma_yield(p, s) * q


def true_joint_density(y, p, s, mode: str):
    """g(y, p | s) = product of the two conditional skew-normal densities."""
    y = np.asarray(y, dtype=float)
    p = np.asarray(p, dtype=float)
    sp = sigma_price(s, mode)
    sy = sigma_yield(p, s)
    gy = sn_pdf((y - mu_yield(p, s)) / sy, ALPHA_YIELD) / sy
    gp = sn_pdf((p - mu_price(s, mode)) / sp, ALPHA_PRICE) / sp
    return gy * gp


# --- density estimation and scoring ------------------------------------------

def _nrd_bandwidth(x) -> float:
    sd = float(np.std(x, ddof=1))
    iqr = float(np.subtract(*np.percentile(x, [75, 25])))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if spread <= 0.0:
        raise SimError("zero spread; bandwidth undefined")
    return 1.06 * spread * x.size ** (-0.2)


def kde2d(
    yields,
    prices,
    grid_size: int = 25,
    bandwidths: Optional[tuple[float, float]] = None,
    limits=None,
) -> DensityGrid:
    """Gaussian product-kernel density estimate on a regular grid.

    Default bandwidth per axis is 1.06 min(sd, IQR/1.34) R^{-1/5}; the
    grid spans the sample range widened by three bandwidths each side.
    """
    ys = np.asarray(yields, dtype=float)
    ps = np.asarray(prices, dtype=float)
    if ys.size != ps.size or ys.size < 2:
        raise SimError("need two equally long sample vectors")
    if bandwidths is None:
        bandwidths = (_nrd_bandwidth(ys), _nrd_bandwidth(ps))
    by, bp = bandwidths
    if by <= 0 or bp <= 0:
        raise SimError("bandwidths must be positive")
    if limits is None:
        limits = (
            ys.min() - 3 * by, ys.max() + 3 * by,
            ps.min() - 3 * bp, ps.max() + 3 * bp,
        )
    ylo, yhi, plo, phi = limits
    ygrid = np.linspace(ylo, yhi, grid_size)
    pgrid = np.linspace(plo, phi, grid_size)
    ky = norm.pdf((ygrid[:, None] - ys[None, :]) / by) / by  # (ny, n)
    kp = norm.pdf((pgrid[:, None] - ps[None, :]) / bp) / bp  # (np, n)
    density = ky @ kp.T / ys.size
    return DensityGrid(
        yield_grid=ygrid, price_grid=pgrid, density=density, bandwidths=(by, bp)
    )


def mise(estimated: DensityGrid, truth) -> float:
    """Mean squared difference over the grid (uniform cell weights).

    ``truth`` is either a callable truth(y, p) -> density or a matrix on
    the same grid.  Averaging over replicates is the caller's business.
    """
    if callable(truth):
        Y, P = np.meshgrid(estimated.yield_grid, estimated.price_grid, indexing="ij")
        target = truth(Y, P)
    else:
        target = np.asarray(truth, dtype=float)
        if target.shape != estimated.density.shape:
            raise SimError("truth grid does not match the estimate grid")
    return float(np.mean((estimated.density - target) ** 2))


# --- study drivers ------------------------------------------------------------

def default_stock_grid(size: int = 50) -> np.ndarray:
    """Evaluation stocks: central 98% of the Beta(7, 44) distribution."""
    from scipy.stats import beta as beta_dist

    lo, hi = beta_dist.ppf([0.01, 0.99], *STOCK_BETA)
    return np.linspace(lo, hi, size)


def _replicate_seed(seed: int, mode: str, m: int) -> np.random.Generator:
    tag = 0 if mode == "linear" else 1
    return np.random.default_rng(np.random.SeedSequence([seed, tag, m]))


def _fit_price_stage(s, p, taus):
    """Price-stage quantile grid only (used by the quantile-recovery study)."""
    support = (0.0, 1.0)
    basis = bspline_basis(np.clip(s, *support), 3, 4, support)
    spec = DesignSpec(bases=(basis,))
    X = spec.matrix([np.clip(s, *support)])
    D = difference_matrix(2, X.shape[1])
    lam = gacv_select(X, p, TAU_LEVELS, D, default_lambda_grid())
    grid = fit_pqr_grid(X, p, np.asarray(taus, float), lam, D, design_spec=spec)
    return spec, grid


def run_price_replicate(config: SimConfig, m: int) -> np.ndarray:
    """One price-stage replicate: estimated curves (ntau, ngrid)."""
    s_grid = default_stock_grid(config.stock_grid_size)
    taus = np.asarray(config.tau_levels, dtype=float)
    rng = _replicate_seed(config.seed, config.price_mode, m)
    s, p, _, _ = _panel_series_only(config, rng)
    spec, grid = _fit_price_stage(s, p, taus)
    X = spec.matrix([s_grid])
    return (X @ grid.coefficients).T


def run_price_study(config: SimConfig, workers: int = 1):
    """M replicates of the price-stage fit, evaluated on the stock grid.

    Returns (stock_grid, curves) with curves of shape (M, ntau, ngrid):
    the estimated price quantile curves per replicate and level.
    """
    from functools import partial

    s_grid = default_stock_grid(config.stock_grid_size)
    curves = _map_replicates(partial(run_price_replicate, config), config.M, workers)
    return s_grid, np.stack(curves)


def _panel_series_only(config: SimConfig, rng):
    """Panel generation without materializing county yields (price study)."""
    a, b = STOCK_BETA
    s = rng.beta(a, b, config.T)
    eps_p = skew_normal_draw(ALPHA_PRICE, rng, config.T)
    p = mu_price(s, config.price_mode) + sigma_price(s, config.price_mode) * eps_p
    return s, p, None, None


def _map_replicates(fn, M, workers):
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, range(M)))
    return [fn(m) for m in range(M)]


def run_joint_replicate(config: SimConfig, m: int) -> dict:
    """One full replicate: fit the joint model, sample, score densities."""
    rng = _replicate_seed(config.seed, config.price_mode, m)
    s, p, y, year_ix = generate_panel(config, rng)
    model = fit_conditional(
        p, s, y, year_ix, price_support=(-1.0, 1.0), stock_support=(0.0, 1.0)
    )
    s_grid = default_stock_grid(config.stock_grid_size)
    taus = np.asarray(config.tau_levels, dtype=float)
    tau_cols = [int(np.argmin(np.abs(model.tau_grid - t))) for t in taus]
    Xg = model.price_spec.matrix([s_grid])
    price_curves = (Xg @ model.price_coefs[:, tau_cols]).T

    ises = {}
    clamp_fractions = {}
    for st in config.eval_stocks:
        draws = sample_conditional(model, float(st), config.R, rng)
        est = kde2d(
            draws.yield_detrended, draws.price_detrended, config.kde_grid_size
        )
        ises[st] = mise(
            est, lambda Y, P: true_joint_density(Y, P, float(st), config.price_mode)
        )
        clamp_fractions[st] = draws.clamp_fraction
    return {
        "m": m,
        "stock_grid": s_grid,
        "price_curves": price_curves,  # (ntau, ngrid)
        "ise": ises,
        "clamp_fraction": clamp_fractions,
        "price_lambda": model.price_lambda,
        "yield_lambda": model.yield_lambda,
    }


def run_joint_study(config: SimConfig, workers: int = 1, out_dir=None) -> dict:
    """Full study for one price mode: MISE by stock level plus curve bands.

    With ``out_dir`` set, writes per-replicate quantile-curve CSV and a
    summary JSON of MISE by (mode, stock level).
    """
    from functools import partial

    results = _map_replicates(partial(run_joint_replicate, config), config.M, workers)
    mise_by_stock = {
        st: float(np.mean([r["ise"][st] for r in results]))
        for st in config.eval_stocks
    }
    summary = {
        "mode": config.price_mode,
        "T": config.T,
        "n_t": config.n_t,
        "M": config.M,
        "R": config.R,
        "seed": config.seed,
        "mise_by_stock": {f"{k:g}": v for k, v in mise_by_stock.items()},
        "mean_clamp_fraction": {
            f"{st:g}": float(np.mean([r["clamp_fraction"][st] for r in results]))
            for st in config.eval_stocks
        },
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_curves_csv(config, results, out_dir)
        path = os.path.join(out_dir, f"mise_{config.price_mode}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return {"summary": summary, "replicates": results}


def _write_curves_csv(config: SimConfig, results, out_dir):
    import csv

    path = os.path.join(out_dir, f"quantile_curves_{config.price_mode}.csv")
    taus = config.tau_levels
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "tau", "stocks", "estimated", "true"])
        for r in results:
            grid = r["stock_grid"]
            for ti, tau in enumerate(taus):
                truth = true_quantile_price(tau, grid, config.price_mode)
                for g, est, tr in zip(grid, r["price_curves"][ti], truth):
                    writer.writerow([r["m"], repr(float(tau)), repr(float(g)),
                                     repr(float(est)), repr(float(tr))])
