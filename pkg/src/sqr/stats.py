"""Moments of joint draws, delete-a-group jackknife, and yield AR-1 fits.

The jackknife partitions county-year records into B groups by a
deterministic systematic rule (records ordered by county then year,
dealt round-robin), reruns the full estimation pipeline with each group
deleted, and applies the (B-1)/B sum-of-squares formula.  Rerunning the
pipeline includes re-selecting the smoothing parameter, so the variance
reflects the whole procedure, not just the final fit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats as _scipy_stats

from .joint_sampler import JointDraws
from .trend import YieldPanel, loess_smooth

__all__ = [
    "StatsError",
    "MomentSummary",
    "ConditionalEstimate",
    "AR1Fit",
    "moments_from_draws",
    "assign_jackknife_groups",
    "jackknife_variance",
    "fit_ar1",
    "smooth_curve",
]


class StatsError(ValueError):
    """Invalid statistical computation request."""


@dataclass(frozen=True)
class MomentSummary:
    corr: float
    sd_price: float
    sd_yield: float
    mean_price: float
    mean_yield: float


@dataclass(frozen=True)
class ConditionalEstimate:
    """Point estimate at one stock level with its jackknife variance."""

    s_til: float
    estimate: float
    jackknife_variance: float
    group_count: int


@dataclass(frozen=True)
class AR1Fit:
    state: str
    rho0: float
    rho1: float
    ci95: tuple[float, float]
    n_pairs: int


def _draw_pair(draws: JointDraws, which: str):
    if which == "auto":
        which = "rebased" if draws.price_rebased is not None else "detrended"
    if which == "rebased":
        if draws.price_rebased is None:
            raise StatsError("draws carry no rebased values")
        return draws.price_rebased, draws.yield_rebased
    if which == "detrended":
        return draws.price_detrended, draws.yield_detrended
    raise StatsError(f"unknown draw scale {which!r}")


def moments_from_draws(draws: JointDraws, which: str = "auto") -> MomentSummary:
    """Sample moments of the draw pairs; correlation needs both spreads > 0."""
    p, y = _draw_pair(draws, which)
    if p.size < 2:
        raise StatsError("need at least two draws")
    sd_p = float(np.std(p, ddof=1))
    sd_y = float(np.std(y, ddof=1))
    if sd_p == 0.0 or sd_y == 0.0:
        raise StatsError("zero variance in a coordinate; correlation undefined")
    corr = float(np.corrcoef(p, y)[0, 1])
    return MomentSummary(
        corr=corr,
        sd_price=sd_p,
        sd_yield=sd_y,
        mean_price=float(np.mean(p)),
        mean_yield=float(np.mean(y)),
    )


def assign_jackknife_groups(
    panel: YieldPanel, B: int, scheme: str = "round_robin"
) -> np.ndarray:
    """Deterministic group ids in 0..B-1, one per panel record.

    "round_robin" orders records by (county, year) and deals them out, so
    group sizes differ by at most one.  "whole_county" deals counties
    instead, keeping each county's records together.
    """
    if B < 2:
        raise StatsError(f"need at least 2 groups, got {B}")
    n = len(panel)
    order = np.lexsort((panel.year, panel.county.astype(str)))
    groups = np.empty(n, dtype=int)
    if scheme == "round_robin":
        groups[order] = np.arange(n) % B
    elif scheme == "whole_county":
        counties = sorted(set(panel.county.tolist()))
        county_group = {c: i % B for i, c in enumerate(counties)}
        groups = np.array([county_group[c] for c in panel.county], dtype=int)
    else:
        raise StatsError(f"unknown grouping scheme {scheme!r}")
    return groups


def jackknife_variance(
    panel: YieldPanel,
    pipeline: Callable[[YieldPanel], np.ndarray],
    B: int = 50,
    scheme: str = "round_robin",
    workers: int = 1,
):
    """Delete-a-group variance of a pipeline estimate.

    ``pipeline`` maps a reduced panel to a scalar or vector estimate; the
    returned variance has the same shape.  Estimates are computed with
    each group deleted and combined as (B-1)/B * sum (est_b - mean)^2.
    Failures name the offending group.
    """
    groups = assign_jackknife_groups(panel, B, scheme)
    present = np.unique(groups)
    subpanels = []
    for b in present.tolist():
        mask = groups != b
        subpanels.append(
            YieldPanel(
                panel.year[mask],
                panel.state[mask],
                panel.county[mask],
                panel.value[mask],
            )
        )

    if workers > 1:
        # pipeline must be picklable (module-level) to cross processes
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            try:
                estimates = [np.asarray(e, float) for e in pool.map(pipeline, subpanels)]
            except Exception as exc:
                raise StatsError(f"jackknife pipeline failed: {exc}") from exc
    else:
        estimates = []
        for b, sub in zip(present.tolist(), subpanels):
            try:
                estimates.append(np.asarray(pipeline(sub), dtype=float))
            except Exception as exc:
                raise StatsError(
                    f"pipeline failed with group {b} deleted: {exc}"
                ) from exc
    est = np.stack(estimates)
    mean = est.mean(axis=0)
    Bn = est.shape[0]
    var = (Bn - 1) / Bn * np.sum((est - mean) ** 2, axis=0)
    return var if var.ndim else float(var)


def fit_ar1(years, counties, detrended_values, state: str = "") -> AR1Fit:
    """Pooled lag-1 OLS within a state: y_t = rho0 + rho1 * y_{t-1} + eps.

    Pairs form only where the same county reports both year t-1 and t.
    The 95% interval uses the classical OLS slope standard error.
    """
    years = np.asarray(years, dtype=int)
    counties = np.asarray(counties, dtype=object)
    values = np.asarray(detrended_values, dtype=float)
    lookup = {(c, int(t)): v for c, t, v in zip(counties, years, values)}
    x, z = [], []
    for (c, t), v in lookup.items():
        prev = lookup.get((c, t - 1))
        if prev is not None:
            x.append(prev)
            z.append(v)
    n = len(x)
    if n < 3:
        raise StatsError(f"need at least 3 consecutive-year pairs, got {n}")
    x = np.asarray(x)
    z = np.asarray(z)
    sxx = float(np.sum((x - x.mean()) ** 2))
    if sxx == 0.0:
        raise StatsError("lagged values are constant; slope undefined")
    rho1 = float(np.sum((x - x.mean()) * (z - z.mean())) / sxx)
    rho0 = float(z.mean() - rho1 * x.mean())
    resid = z - rho0 - rho1 * x
    sigma2 = float(resid @ resid) / (n - 2)
    se = np.sqrt(sigma2 / sxx)
    tcrit = float(_scipy_stats.t.ppf(0.975, n - 2))
    return AR1Fit(
        state=state,
        rho0=rho0,
        rho1=rho1,
        ci95=(rho1 - tcrit * se, rho1 + tcrit * se),
        n_pairs=n,
    )


def smooth_curve(s_values, estimates, span: float = 0.75, xq=None) -> np.ndarray:
    """LOESS presentation smoothing of an estimate-vs-stocks curve."""
    return loess_smooth(s_values, estimates, span=span, xq=xq)
