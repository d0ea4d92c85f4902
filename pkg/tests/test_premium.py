import numpy as np
import pytest

from sqr.premium import (
    PremiumConfig,
    PremiumError,
    binomial_upper_tail,
    fit_stock_channels,
    indemnity,
    loss_ratio,
    rating_game,
    simulate_premium,
)
from sqr.trend import MarketSeries, fit_trend


def make_series(T=29, iv=None, futures=None, stocks=None, production=None, seed=0):
    rng = np.random.default_rng(seed)
    years = np.arange(1990, 1990 + T)
    return MarketSeries(
        year=years,
        harvest_price=2.5 + 0.05 * np.arange(T),
        feb_futures=(
            2.6 + 0.05 * np.arange(T) if futures is None else np.asarray(futures, float)
        ),
        implied_vol=np.full(T, 0.22) if iv is None else np.asarray(iv, float),
        stocks=(
            np.linspace(1100, 1700, T) * rng.uniform(0.9, 1.1, T)
            if stocks is None else np.asarray(stocks, float)
        ),
        national_production=(
            np.linspace(8000, 14000, T)
            if production is None else np.asarray(production, float)
        ),
        gdp_deflator=np.linspace(0.6, 1.0, T),
    )


class TestIndemnity:
    def test_worked_example(self):
        assert indemnity(0.85, 4.0, 150.0, 3.0, 120.0) == pytest.approx(150.0)

    def test_revenue_above_guarantee(self):
        assert indemnity(0.85, 4.0, 150.0, 5.0, 160.0) == 0.0

    def test_total_loss_pays_guarantee(self):
        assert indemnity(0.85, 4.0, 150.0, 3.0, 0.0) == pytest.approx(0.85 * 4 * 150)

    def test_convex_nonincreasing_in_revenue(self):
        guarantee = 0.85 * 4.0 * 150.0
        rev = np.linspace(0, 2 * guarantee, 200)
        vals = np.maximum(guarantee - rev, 0.0)
        mine = indemnity(0.85, 4.0, 150.0, np.ones_like(rev), rev)
        assert np.allclose(mine, vals)
        # piecewise-linear convexity on a grid: midpoint under chord
        for i in range(0, 180, 10):
            mid = indemnity(0.85, 4.0, 150.0, 1.0, (rev[i] + rev[i + 20]) / 2)
            chord = (mine[i] + mine[i + 20]) / 2
            assert mid <= chord + 1e-12

    def test_negative_inputs_rejected(self):
        with pytest.raises(PremiumError):
            indemnity(0.85, -4.0, 150.0, 3.0, 120.0)
        with pytest.raises(PremiumError):
            indemnity(0.85, 4.0, 150.0, 3.0, -1.0)


class TestStockChannels:
    def test_constant_futures_zero_variance(self):
        s = make_series(futures=np.full(29, 3.0))
        from sqr.trend import normalize_stocks

        st = normalize_stocks(s)
        ch = fit_stock_channels(s, st)
        assert ch.futures_fit.sigma2_hat == pytest.approx(0.0, abs=1e-12)
        assert ch.futures_log_mean(float(st.mean())) == pytest.approx(np.log(3.0))

    def test_decreasing_iv_recovered(self):
        # IV falls with stocks in the DGP; the fitted curve must fall too
        rng = np.random.default_rng(1)
        T = 40
        stocks = np.linspace(900, 2000, T) * rng.uniform(0.98, 1.02, T)
        s = make_series(T=T, stocks=stocks, production=np.full(T, 9000.0))
        from sqr.trend import normalize_stocks

        st = normalize_stocks(s)
        iv = 0.35 - 0.6 * st + rng.normal(0, 0.01, T)
        s2 = MarketSeries(
            year=s.year, harvest_price=s.harvest_price, feb_futures=s.feb_futures,
            implied_vol=iv, stocks=s.stocks,
            national_production=s.national_production, gdp_deflator=s.gdp_deflator,
        )
        ch = fit_stock_channels(s2, st)
        lo, hi = np.quantile(st, [0.1, 0.9])
        assert ch.iv_mean(lo) > ch.iv_mean(hi)

    def test_gram_matches_definition(self):
        s = make_series()
        from sqr.trend import normalize_stocks
        from sqr.bspline import basis_matrix

        st = normalize_stocks(s)
        ch = fit_stock_channels(s, st)
        X = basis_matrix(ch.futures_fit.basis, st, clamp=True)
        F = sum(np.outer(X[i], X[i]) for i in range(len(st))) / len(st)
        assert np.max(np.abs(F - ch.futures_fit.gram_hat)) < 1e-12

    def test_iv_log_scale_variant(self):
        s = make_series()
        from sqr.trend import normalize_stocks

        st = normalize_stocks(s)
        ch = fit_stock_channels(s, st, iv_log_scale=True)
        # fitted log-IV mean near log(0.22)
        assert ch.iv_mean(float(np.median(st))) == pytest.approx(np.log(0.22), abs=0.05)


def degenerate_setup():
    """Zero-variance channels/trends plus a constant-quantile yield model."""
    from sqr.joint_sampler import ConditionalJointModel
    from sqr.quantile_fit import DesignSpec
    from sqr.bspline import bspline_basis

    T = 29
    t = np.arange(1, T + 1, dtype=float)
    price_trend = fit_trend(t, np.full(T, np.log(3.0)))
    yield_trend = fit_trend(t, np.full(T, 150.0))
    s = make_series(futures=np.full(T, 4.0), iv=np.full(T, 1e-12))
    from sqr.trend import normalize_stocks

    st = normalize_stocks(s)
    channels = fit_stock_channels(s, st)
    pb = bspline_basis(np.linspace(-1, 1, 40), 3, 4, (-1, 1))
    spec = DesignSpec(bases=(pb,))
    tau_grid = np.round(np.arange(1, 100) / 100, 2)
    model = ConditionalJointModel(
        tau_grid=tau_grid,
        yield_spec=spec,
        yield_coefs=np.zeros((7, 99)),
        price_support=(-1.0, 1.0),
        conditions_on_stocks=False,
        price_scalar_quantiles=np.zeros(99),
    )
    return model, channels, price_trend, yield_trend, st


class TestSimulatePremium:
    def test_degenerate_revenue_above_guarantee(self):
        model, channels, pt, yt, st = degenerate_setup()
        # yield draws = 150 exactly, price = futures = 4.0 (zero vols)
        # guarantee 0.5 * 4 * 150 = 300 < revenue 4 * 150 = 600
        cfg = PremiumConfig(coverage=0.5, aph_yield=150.0)
        res = simulate_premium(
            "two_channel", model, channels, pt, yt, cfg,
            float(np.median(st)), 15.0, 200, np.random.default_rng(0),
            iv_floor=0.0,
        )
        assert res.premium == 0.0

    def test_degenerate_fixed_shortfall(self):
        model, channels, pt, yt, st = degenerate_setup()
        # psi * pbar * aph = 1.0 * 4 * 160 = 640; revenue = 4 * 150 = 600
        cfg = PremiumConfig(coverage=1.0, aph_yield=160.0)
        res = simulate_premium(
            "two_channel", model, channels, pt, yt, cfg,
            float(np.median(st)), 15.0, 200, np.random.default_rng(0),
            iv_floor=0.0,
        )
        assert res.premium == pytest.approx(40.0, abs=1e-6)

    def test_monotone_in_coverage(self):
        model, channels, pt, yt, st = degenerate_setup()
        prems = []
        for psi in (0.5, 0.7, 0.85, 1.0):
            cfg = PremiumConfig(coverage=psi, aph_yield=160.0)
            res = simulate_premium(
                "two_channel", model, channels, pt, yt, cfg,
                float(np.median(st)), 15.0, 500, np.random.default_rng(42),
                iv_floor=0.0,
            )
            prems.append(res.premium)
        assert np.all(np.diff(prems) >= 0)

    def test_model_kind_validation(self):
        model, channels, pt, yt, st = degenerate_setup()
        cfg = PremiumConfig(coverage=0.85, aph_yield=150.0)
        with pytest.raises(PremiumError):
            simulate_premium(
                "three_channel", model, channels, pt, yt, cfg,
                0.15, 15.0, 10, np.random.default_rng(0),
            )


class TestLossRatio:
    def test_equal_gives_one(self):
        assert loss_ratio([50.0, 50.0], [60.0, 40.0]) == pytest.approx(1.0)

    def test_no_losses(self):
        assert loss_ratio([0.0, 0.0], [60.0, 40.0]) == 0.0

    def test_homogeneity(self):
        lr1 = loss_ratio([30.0, 20.0], [25.0, 25.0])
        lr2 = loss_ratio([30.0, 20.0], [50.0, 50.0])
        assert lr2 == pytest.approx(lr1 / 2)

    def test_zero_premium_rejected(self):
        with pytest.raises(PremiumError):
            loss_ratio([1.0], [0.0])


class TestBinomialTail:
    def test_paper_p_value_vocabulary(self):
        targets = {
            21: 0.0121, 19: 0.0680, 17: 0.2291, 16: 0.3555, 15: 0.5000,
            14: 0.6445, 13: 0.7709, 12: 0.8675, 11: 0.9320, 10: 0.9693,
            9: 0.9879,
        }
        for k, val in targets.items():
            assert binomial_upper_tail(29, k) == pytest.approx(val, abs=5e-4)
        assert binomial_upper_tail(29, 6) == pytest.approx(0.9997, abs=5e-4)
        assert binomial_upper_tail(29, 5) == pytest.approx(0.9999, abs=5e-4)

    def test_all_successes(self):
        for T in (5, 12, 29):
            assert binomial_upper_tail(T, T) == pytest.approx(0.5**T)

    def test_matches_log_gamma_oracle(self):
        # independent 64-bit-safe implementation via log-gamma
        from math import lgamma, exp

        def oracle(T, k):
            return sum(
                exp(lgamma(T + 1) - lgamma(i + 1) - lgamma(T - i + 1) - T * np.log(2))
                for i in range(k, T + 1)
            )

        for T in (13, 29, 64):
            for k in range(0, T + 1, 3):
                assert binomial_upper_tail(T, k) == pytest.approx(
                    oracle(T, k), abs=1e-12
                )

    def test_monotone_in_k(self):
        vals = [binomial_upper_tail(29, k) for k in range(30)]
        assert np.all(np.diff(vals) <= 0)


class TestRatingGame:
    def test_identical_methods_tie(self):
        rng = np.random.default_rng(0)
        years = np.repeat(np.arange(2000, 2029), 10)
        ind = rng.uniform(0, 100, years.size)
        prem = rng.uniform(10, 50, years.size)
        res = rating_game(years, ind, prem, prem.copy())
        assert res.d_star == 0
        assert res.effective_years == 29
        assert np.allclose(res.d_values, 1.0)
        assert res.p_value == pytest.approx(binomial_upper_tail(29, 0))

    def test_skilled_method_wins(self):
        # three-channel knows the true expected indemnity; two-channel is
        # noisy: D_t should exceed 1 in most years
        rng = np.random.default_rng(1)
        T, units = 29, 60
        years = np.repeat(np.arange(T), units)
        true_rate = rng.uniform(10, 60, years.size)
        ind = rng.poisson(true_rate).astype(float)
        prem3 = true_rate
        prem2 = true_rate * rng.uniform(0.6, 1.4, years.size)
        res = rating_game(years, ind, prem3, prem2)
        assert res.effective_years > 20
        assert res.d_star > res.effective_years * 0.6
        assert res.p_value < 0.05

    def test_p_value_nonincreasing_in_dstar(self):
        vals = [binomial_upper_tail(29, k) for k in range(0, 30)]
        assert all(vals[i] >= vals[i + 1] for i in range(29))

    def test_swap_inverts(self):
        rng = np.random.default_rng(2)
        years = np.repeat(np.arange(10), 8)
        ind = rng.uniform(0, 100, years.size)
        p3 = rng.uniform(10, 50, years.size)
        p2 = rng.uniform(10, 50, years.size)
        a = rating_game(years, ind, p3, p2, proposed="three_channel")
        b = rating_game(years, ind, p3, p2, proposed="two_channel")
        mask = np.isfinite(a.d_values) & np.isfinite(b.d_values)
        assert np.allclose(a.d_values[mask] * b.d_values[mask], 1.0)

    def test_empty_bucket_year_excluded(self):
        years = np.array([2000, 2000, 2001, 2001])
        ind = np.array([10.0, 5.0, 8.0, 2.0])
        p3 = np.array([5.0, 6.0, 4.0, 4.5])
        p2 = np.array([4.0, 5.0, 5.0, 5.0])  # 2001: 3ch lower everywhere
        res = rating_game(years, ind, p3, p2)
        assert res.excluded_years == 2
        assert res.effective_years == 0
