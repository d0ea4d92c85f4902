import numpy as np
import pytest

from sqr.joint_sampler import (
    ConditionalJointModel,
    SamplerError,
    fit_conditional,
    fit_unconditional,
    retrend_and_rebase,
    sample_conditional,
    sample_unconditional,
)
from sqr.trend import fit_trend


def synthetic_panel(T=60, n_t=30, seed=0, slope=0.0, noise=10.0):
    """Small stock-conditioned panel: price scale shrinks with stocks."""
    rng = np.random.default_rng(seed)
    s = rng.beta(7, 44, T)
    p = (0.2 - 0.4 * s) + (0.5 - 0.5 * s) * rng.standard_normal(T)
    year_ix = np.repeat(np.arange(T), n_t)
    y = slope * p[year_ix] + noise * rng.standard_normal(T * n_t)
    return p, s, y, year_ix


def fit_small(seed=0, **kwargs):
    p, s, y, year_ix = synthetic_panel(seed=seed)
    defaults = dict(price_support=(-1, 1), stock_support=(0, 1))
    defaults.update(kwargs)
    return fit_conditional(p, s, y, year_ix, **defaults), (p, s, y, year_ix)


def ks_distance(draws, cdf_right, cdf_left):
    """KS between the empirical law and a CDF that may carry atoms."""
    v, counts = np.unique(draws, return_counts=True)
    n = draws.size
    cum = np.cumsum(counts)
    upper = np.abs(cum / n - cdf_right(v))
    lower = np.abs((cum - counts) / n - cdf_left(v))
    return float(max(upper.max(), lower.max()))


class TestFitConditional:
    def test_fit_dimensions(self):
        taus = np.array([0.1, 0.25, 0.5, 0.75, 0.9])
        model, _ = fit_small(tau_grid=taus)
        # five price fits of length r + K_n = 7, five yield fits of 14
        assert model.price_coefs.shape == (7, 5)
        assert model.yield_coefs.shape == (14, 5)

    def test_homoskedastic_location_model_iqr_flat(self):
        # location-only price effect: the y IQR should not vary much in s
        rng = np.random.default_rng(1)
        T, n_t = 80, 60
        s = rng.beta(7, 44, T)
        p = 0.2 - 0.4 * s + 0.3 * rng.standard_normal(T)
        year_ix = np.repeat(np.arange(T), n_t)
        y = 10.0 * p[year_ix] + 5.0 * rng.standard_normal(T * n_t)
        model = fit_conditional(
            p, s, y, year_ix, price_support=(-1.2, 1.2), stock_support=(0, 1)
        )
        iqrs = []
        for st in (0.09, 0.13, 0.2):
            lat = np.array([0.0])
            q = model.yield_quantile_lattice(st, lat)[:, 0]
            i25 = np.searchsorted(model.tau_grid, 0.25)
            i75 = np.searchsorted(model.tau_grid, 0.75)
            iqrs.append(q[i75] - q[i25])
        iqrs = np.asarray(iqrs)
        assert iqrs.max() / iqrs.min() - 1.0 < 0.25

    def test_degenerate_zero_yield(self):
        p, s, y, year_ix = synthetic_panel()
        model = fit_conditional(
            p, s, np.zeros_like(y), year_ix,
            price_support=(-1, 1), stock_support=(0, 1),
        )
        lat = np.linspace(-0.5, 0.5, 11)
        Q = model.yield_quantile_lattice(0.13, lat)
        assert np.max(np.abs(Q)) < 1e-6

    def test_tau_grid_outside_clamp_rejected(self):
        p, s, y, year_ix = synthetic_panel()
        with pytest.raises(SamplerError):
            fit_conditional(
                p, s, y, year_ix, tau_grid=np.array([0.0005, 0.5]),
                price_support=(-1, 1), stock_support=(0, 1),
            )

    def test_misaligned_inputs_rejected(self):
        p, s, y, year_ix = synthetic_panel()
        with pytest.raises(SamplerError):
            fit_conditional(p, s[:-1], y, year_ix)
        with pytest.raises(SamplerError):
            fit_conditional(p, s, y, year_ix + 1000)


class TestSampling:
    def test_draw_determinism(self):
        model, _ = fit_small()
        d1 = sample_conditional(model, 0.13, 500, np.random.default_rng(9))
        d2 = sample_conditional(model, 0.13, 500, np.random.default_rng(9))
        assert np.array_equal(d1.price_detrended, d2.price_detrended)
        assert np.array_equal(d1.yield_detrended, d2.yield_detrended)

    def test_monotone_in_tau(self):
        model, _ = fit_small()
        curve = model.price_quantile_curve(0.13)
        assert np.all(np.diff(curve) >= 0)
        taus = np.linspace(0.01, 0.99, 200)
        vals = model.price_quantile(taus, 0.13)
        assert np.all(np.diff(vals) >= 0)
        # rearranged yield surface is nondecreasing in tau at every lattice
        # point, and stays so after interpolating in the price coordinate
        lat = np.linspace(*model.price_support, 31)
        Q = model.yield_quantile_lattice(0.13, lat)
        assert np.all(np.diff(Q, axis=0) >= 0)
        probe = model.yield_quantile(taus, np.full(taus.size, 0.21), 0.13)
        assert np.all(np.diff(probe) >= -1e-12)

    def test_degenerate_constant_curves(self):
        # constant quantile curves: every draw equals the constant
        model, _ = fit_small()
        const = ConditionalJointModel(
            tau_grid=model.tau_grid,
            yield_spec=model.yield_spec,
            yield_coefs=np.zeros_like(model.yield_coefs),
            price_support=model.price_support,
            stock_support=model.stock_support,
            conditions_on_stocks=True,
            price_spec=model.price_spec,
            price_coefs=np.tile(
                model.price_coefs[:, :1] * 0 + 1.0 / 1, (1, model.tau_grid.size)
            ),
            tau_clamp=model.tau_clamp,
        )
        d = sample_conditional(const, 0.13, 200, np.random.default_rng(3))
        assert np.allclose(d.price_detrended, d.price_detrended[0])

    def test_inverse_transform_self_consistency(self):
        model, _ = fit_small()
        d = sample_conditional(model, 0.13, 20_000, np.random.default_rng(4))
        ks = ks_distance(
            d.price_detrended,
            lambda x: model.price_cdf(x, 0.13),
            lambda x: model.price_cdf(x, 0.13, left=True),
        )
        assert ks < 0.015  # ~2x MC noise at R = 20k

    def test_quantile_match_at_interior_taus(self):
        model, _ = fit_small()
        d = sample_conditional(model, 0.13, 100_000, np.random.default_rng(5))
        for tq in (0.25, 0.5, 0.75):
            emp = np.quantile(d.price_detrended, tq)
            mod = model.price_quantile(
                model.tau_clamp[0]
                + tq * (model.tau_clamp[1] - model.tau_clamp[0]),
                0.13,
            )
            assert emp == pytest.approx(mod, abs=0.02)

    def test_outside_support_rejected(self):
        model, _ = fit_small()
        with pytest.raises(SamplerError):
            sample_conditional(model, 2.0, 10, np.random.default_rng(0))
        with pytest.raises(SamplerError):
            sample_conditional(model, 0.13, 0, np.random.default_rng(0))

    def test_clamp_accounting(self):
        model, _ = fit_small()
        d = sample_conditional(model, 0.09, 50_000, np.random.default_rng(6))
        curve = model.price_quantile_curve(0.09)
        lo, hi = model.price_support
        expected = np.mean(
            (model.price_quantile(d.tau_price, 0.09) < lo)
            | (model.price_quantile(d.tau_price, 0.09) > hi)
        )
        assert d.clamp_fraction == pytest.approx(expected)


class TestUnconditional:
    def test_scalar_median(self):
        p, s, y, year_ix = synthetic_panel(T=61)
        model = fit_unconditional(p, y, year_ix, price_support=(-1, 1))
        i50 = int(np.searchsorted(model.tau_grid, 0.5))
        assert model.price_scalar_quantiles[i50] == pytest.approx(np.median(p))

    def test_constant_price_series(self):
        p, s, y, year_ix = synthetic_panel()
        model = fit_unconditional(np.full_like(p, 0.3), y, year_ix,
                                  price_support=(-1, 1))
        d = sample_unconditional(model, 300, np.random.default_rng(7))
        assert np.allclose(d.price_detrended, 0.3)

    def test_conditional_sampler_rejected(self):
        model, _ = fit_small()
        with pytest.raises(SamplerError):
            sample_unconditional(model, 10, np.random.default_rng(0))


class TestRetrendRebase:
    def _trends(self):
        t = np.arange(1, 30, dtype=float)
        price_trend = fit_trend(t, np.full(29, np.log(3.0)))  # sigma2 = 0
        yield_trend = fit_trend(t, np.full(29, 150.0))
        return price_trend, yield_trend

    def test_zero_variance_trends_exact(self):
        model, _ = fit_small()
        d = sample_conditional(model, 0.13, 400, np.random.default_rng(8))
        pt, yt = self._trends()
        out = retrend_and_rebase(d, pt, yt, 12.0, 29.0, 0.8, np.random.default_rng(9))
        assert np.allclose(
            out.price_rebased, np.exp(np.log(3.0) + d.price_detrended) / 0.8
        )
        assert np.all(out.price_rebased > 0)
        assert np.allclose(out.yield_rebased, 150.0 + d.yield_detrended)

    def test_mean_matches_base_trend(self):
        rng = np.random.default_rng(10)
        t = np.arange(1, 30, dtype=float)
        yield_trend = fit_trend(t, 100 + 2 * t + rng.normal(0, 3, 29))
        price_trend = fit_trend(t, np.log(2.5 + 0.05 * t) + rng.normal(0, 0.05, 29))
        model, _ = fit_small()
        d = sample_conditional(model, 0.13, 10_000, np.random.default_rng(11))
        out = retrend_and_rebase(
            d, price_trend, yield_trend, 15.0, 29.0, 1.0, np.random.default_rng(12)
        )
        target = yield_trend.fitted(29.0) + d.yield_detrended.mean()
        se = np.sqrt(yield_trend.draw_variance(15.0) / 10_000)
        tol = 3 * max(se, d.yield_detrended.std() / 100)
        assert abs(out.yield_rebased.mean() - target) < 3 * (se + 0.1)
