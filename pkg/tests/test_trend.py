import numpy as np
import pytest

from sqr.trend import (
    MarketSeries,
    TrendError,
    YieldPanel,
    detrend,
    draw_trend,
    fit_trend,
    loess_smooth,
    normalize_stocks,
    rebase_price,
    rebase_to_year,
    rebase_yield,
    retrend,
)


def make_series(T=29, start=1990, stocks=None, production=None):
    years = np.arange(start, start + T)
    rng = np.random.default_rng(0)
    return MarketSeries(
        year=years,
        harvest_price=2.5 + 0.05 * np.arange(T) + rng.uniform(0, 0.2, T),
        feb_futures=2.6 + 0.05 * np.arange(T),
        implied_vol=np.full(T, 0.22),
        stocks=np.full(T, 1300.0) if stocks is None else np.asarray(stocks, float),
        national_production=(
            np.full(T, 9000.0) if production is None else np.asarray(production, float)
        ),
        gdp_deflator=np.linspace(0.6, 1.0, T),
    )


class TestFitTrend:
    def test_constant_values(self):
        t = np.arange(1, 30, dtype=float)
        model = fit_trend(t, np.full(29, 7.0))
        assert np.allclose(model.fitted(t), 7.0, atol=1e-8)
        assert model.sigma2_hat == pytest.approx(0.0, abs=1e-16)

    def test_t29_coefficient_length(self):
        # T = 29 -> K_n = 3 -> r + K_n = 6 coefficients
        t = np.arange(1, 30, dtype=float)
        model = fit_trend(t, np.log(2.5 + 0.05 * t))
        assert model.coefficients.shape == (6,)
        assert model.basis.support == (0.0, 29.0)

    def test_affine_values_interpolated_at_small_lambda(self):
        # the cubic basis reproduces affine functions; at the unpenalized
        # end of the grid residuals vanish
        t = np.arange(1, 30, dtype=float)
        y = 3.0 + 0.25 * t
        model = fit_trend(t, y, lambda_grid=[1e-8])
        assert np.max(np.abs(model.fitted(t) - y)) < 1e-8

    def test_lambda_inf_limit_matches_penalty_null_space_ls(self):
        # with lambda huge, the fit converges to least squares over the
        # null space of D_2 in coefficient space (constant + index ramp
        # through the basis; the ramp is affine except near the support
        # ends where the clamped-knot Greville sites bend it)
        rng = np.random.default_rng(1)
        t = np.arange(1, 30, dtype=float)
        y = 3.0 + 0.25 * t + rng.normal(0, 0.3, 29)
        model = fit_trend(t, y, lambda_grid=[1e9])
        from sqr.bspline import basis_matrix

        X = basis_matrix(model.basis, t)
        p = X.shape[1]
        N = np.column_stack([np.ones(p), np.arange(p, dtype=float)])
        Q = X @ N
        coef, *_ = np.linalg.lstsq(Q, y, rcond=None)
        assert np.max(np.abs(model.fitted(t) - Q @ coef)) < 1e-4

    def test_duplicated_times_pool_observations(self):
        t = np.repeat(np.arange(1, 21, dtype=float), 5)
        rng = np.random.default_rng(2)
        y = 100 + 2 * t + rng.normal(0, 5, t.size)
        model = fit_trend(t, y)
        assert model.sample_count == 100
        # gram averages over the 20 distinct years only
        assert model.gram_hat.shape == (model.basis.size,) * 2

    def test_short_series_falls_back_to_kn1(self):
        t = np.arange(1, 7, dtype=float)
        model = fit_trend(t, t * 1.1)
        assert model.basis.interior_knot_count == 1

    def test_errors(self):
        with pytest.raises(TrendError):
            fit_trend([1.0], [2.0])
        with pytest.raises(TrendError):
            fit_trend([1.0, 2.0], [np.nan, 2.0])


class TestDetrendRetrend:
    def test_price_roundtrip_exact(self):
        t = np.arange(1, 30, dtype=float)
        prices = 2.5 + 0.1 * t
        model = fit_trend(t, np.log(prices))
        til = detrend(prices, t, model, "log_price")
        back = retrend(til, t, model, "log_price")
        assert np.allclose(back, prices, rtol=0, atol=1e-12)

    def test_yield_roundtrip_exact(self):
        t = np.arange(1, 30, dtype=float)
        y = 100 + 2 * t
        model = fit_trend(t, y)
        til = detrend(y, t, model, "level_yield")
        assert np.allclose(retrend(til, t, model, "level_yield"), y, atol=1e-12)

    def test_price_on_trend_gives_zero(self):
        t = np.arange(1, 30, dtype=float)
        model = fit_trend(t, np.log(2.5 + 0.1 * t))
        p = np.exp(model.fitted(t))
        assert np.max(np.abs(detrend(p, t, model, "log_price"))) < 1e-12

    def test_detrended_yield_mean_near_zero(self):
        rng = np.random.default_rng(3)
        t = np.repeat(np.arange(1, 31, dtype=float), 40)
        y = 90 + 1.5 * t + rng.normal(0, 8, t.size)
        model = fit_trend(t, y)
        til = detrend(y, t, model, "level_yield")
        assert abs(til.mean()) < 0.5

    def test_nonpositive_price_rejected(self):
        t = np.arange(1, 30, dtype=float)
        model = fit_trend(t, np.log(2.5 + 0.1 * t))
        with pytest.raises(TrendError):
            detrend(np.r_[np.full(28, 2.0), -1.0], t, model, "log_price")


class TestDrawTrend:
    def test_zero_variance_returns_fit(self):
        t = np.arange(1, 30, dtype=float)
        model = fit_trend(t, np.full(29, 5.0))
        rng = np.random.default_rng(4)
        draws = draw_trend(model, 12.0, rng, size=50)
        assert np.allclose(draws, model.fitted(12.0), atol=1e-6)

    def test_mc_variance_matches_formula(self):
        rng = np.random.default_rng(5)
        t = np.arange(1, 30, dtype=float)
        y = np.log(2.5 + 0.1 * t) + rng.normal(0, 0.1, 29)
        model = fit_trend(t, y)
        draws = draw_trend(model, 15.0, np.random.default_rng(6), size=10_000)
        target = model.draw_variance(15.0)
        assert np.var(draws) == pytest.approx(target, rel=0.05)
        se = np.sqrt(target / 10_000)
        assert abs(np.mean(draws) - model.fitted(15.0)) < 3.5 * se

    def test_variance_scales_inverse_n(self):
        t = np.arange(1, 30, dtype=float)
        rng = np.random.default_rng(7)
        y = 100 + 2 * t + rng.normal(0, 5, 29)
        m1 = fit_trend(t, y)
        m2 = fit_trend(np.repeat(t, 2), np.repeat(y, 2))
        v1 = m1.draw_variance(10.0)
        v2 = m2.draw_variance(10.0)
        # doubling the sample count roughly halves the variance (the
        # refit changes sigma2 and lambda slightly)
        assert v2 < 0.75 * v1


class TestLoess:
    def test_constant(self):
        x = np.linspace(0, 1, 40)
        assert np.allclose(loess_smooth(x, np.full(40, 3.0)), 3.0)

    def test_exact_line_full_span(self):
        x = np.linspace(0, 1, 40)
        y = 2.0 + 3.0 * x
        assert np.allclose(loess_smooth(x, y, span=1.0), y, atol=1e-10)

    def test_noisy_sine(self):
        rng = np.random.default_rng(8)
        x = np.sort(rng.uniform(0, 2 * np.pi, 400))
        noise_sd = 0.1
        y = np.sin(x) + rng.normal(0, noise_sd, 400)
        fit = loess_smooth(x, y, span=0.3)
        assert np.max(np.abs(fit - np.sin(x))) < 3 * noise_sd

    def test_too_few_points(self):
        with pytest.raises(TrendError):
            loess_smooth([0.0, 1.0], [1.0, 2.0], degree=1)


class TestNormalizeStocks:
    def test_stocks_equal_production_gives_one(self):
        s = make_series(stocks=np.full(29, 9000.0))
        assert np.allclose(normalize_stocks(s), 1.0, atol=1e-9)

    def test_halving_stocks_halves_ratio(self):
        s1 = make_series()
        s2 = make_series(stocks=s1.stocks / 2)
        assert np.allclose(normalize_stocks(s2), normalize_stocks(s1) / 2)

    def test_empirical_corn_scale(self):
        # stocks ~1300-1600 over production ~9000-11000 lands in the
        # production-normalized range seen for 1990-2018 corn
        rng = np.random.default_rng(9)
        T = 29
        prod = np.linspace(8000, 14000, T) * rng.uniform(0.97, 1.03, T)
        stocks = np.linspace(1100, 1700, T) * rng.uniform(0.9, 1.1, T)
        s = make_series(stocks=stocks, production=prod)
        st = normalize_stocks(s)
        assert np.all(st > 0.05) and np.all(st < 0.35)


class TestRebase:
    def test_price_arithmetic(self):
        assert rebase_price(4.0, 0.8) == pytest.approx(5.0)

    def test_yield_arithmetic(self):
        t = np.arange(1, 30, dtype=float)
        model = fit_trend(t, 100 + 2 * t, lambda_grid=[1e-8])
        # trend(20) - trend(10) = 20 on the affine fit
        out = rebase_yield(150.0, model, 10.0, 20.0)
        assert out == pytest.approx(170.0, abs=1e-6)

    def test_base_year_identity(self):
        t = np.arange(1, 30, dtype=float)
        model = fit_trend(t, 100 + 2 * t)
        p, y = rebase_to_year(4.0, 150.0, model, 12.0, 12.0, 1.0)
        assert p == pytest.approx(4.0)
        assert np.allclose(y, 150.0)

    def test_idempotent_on_yields(self):
        t = np.arange(1, 30, dtype=float)
        model = fit_trend(t, 100 + 2 * t)
        y1 = rebase_yield(150.0, model, 10.0, 25.0)
        y2 = rebase_yield(y1, model, 25.0, 25.0)
        assert np.allclose(y1, y2)

    def test_beyond_support_clamps(self):
        t = np.arange(1, 30, dtype=float)
        model = fit_trend(t, 100 + 2 * t)
        # base year two steps past the data clamps to the boundary value
        y31 = rebase_yield(0.0, model, 29.0, 31.0)
        y29 = rebase_yield(0.0, model, 29.0, 29.0)
        assert np.allclose(y31, y29)


class TestContainers:
    def test_market_series_validation(self):
        with pytest.raises(TrendError):
            make_series(stocks=np.full(29, -1.0))
        s = make_series()
        assert len(s) == 29
        assert s.time_index()[0] == 1 and s.time_index()[-1] == 29

    def test_yield_panel_validation(self):
        panel = YieldPanel(
            year=[2000, 2000, 2001],
            state=["IA", "IA", "IA"],
            county=["adair", "polk", "adair"],
            value=[150.0, 140.0, 152.0],
        )
        assert panel.records_per_year() == {2000: 2, 2001: 1}
        with pytest.raises(TrendError):
            YieldPanel([2000, 2000], ["IA", "IA"], ["adair", "adair"], [1.0, 2.0])

    def test_for_state(self):
        panel = YieldPanel(
            year=[2000, 2000], state=["IA", "IL"], county=["a", "b"], value=[1.0, 2.0]
        )
        assert len(panel.for_state("IA")) == 1
        with pytest.raises(TrendError):
            panel.for_state("ND")
