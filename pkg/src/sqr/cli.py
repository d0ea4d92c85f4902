"""Batch front-end: CSV ingestion, pipeline orchestration, artifact output.

Usage: ``sqr <subcommand> --config <path> [--seed N] [--workers K] [--out DIR]``

Subcommands: detrend, fit, sample, correlate, premium, rating-game,
simstudy.  The config file is plain ``key = value`` text (``#`` comments);
unknown keys are rejected.  Every run writes a manifest (seed, versions,
config hash, input digests) next to its outputs, numeric CSV fields use
shortest round-trip decimal formatting, and all randomness derives from
one seed through named substreams, so a rerun with the same config and
seed is byte-identical.

Exit codes: 0 success, 2 configuration error, 3 ingestion error,
4 numeric/pipeline failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass

import numpy as np

from . import __version__
from .joint_sampler import (
    fit_conditional,
    fit_unconditional,
    retrend_and_rebase,
    sample_conditional,
)
from .premium import (
    PremiumConfig,
    fit_stock_channels,
    indemnity,
    rating_game,
    simulate_premium,
)
from .simstudy import SimConfig, run_joint_study
from .stats import fit_ar1, jackknife_variance, moments_from_draws, smooth_curve
from .trend import (
    MarketSeries,
    TrendError,
    YieldPanel,
    detrend,
    fit_trend,
    normalize_stocks,
)

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_INGEST = 3
EXIT_NUMERIC = 4

MARKET_COLUMNS = (
    "year",
    "harvest_price",
    "feb_futures",
    "implied_vol",
    "stocks",
    "national_production",
    "gdp_deflator",
)
YIELD_COLUMNS = ("year", "state", "county", "yield")


class ConfigError(ValueError):
    pass


class IngestError(ValueError):
    pass


def substream(seed: int, *labels) -> np.random.Generator:
    """Named, reproducible RNG substream derived from the run seed."""
    words = [int(seed) & 0xFFFFFFFF]
    words += [zlib.crc32(str(l).encode("utf-8")) for l in labels]
    return np.random.default_rng(np.random.SeedSequence(words))


# --- config file --------------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


_TYPES = {
    "int": int,
    "float": float,
    "str": str,
}


def _parse_value(key, raw, kind):
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "float_list":
            return [float(v) for v in raw.split(",") if v.strip()]
        if kind == "str_list":
            return [v.strip() for v in raw.split(",") if v.strip()]
        return _TYPES[kind](raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from exc


def resolve_config(raw: dict[str, str], schema: dict[str, tuple]) -> dict:
    """Validate a raw key-value map against {key: (type, default-or-None)}."""
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    resolved = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            resolved[key] = _parse_value(key, raw[key], kind)
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            resolved[key] = default
    return resolved


_REQUIRED = object()

_COMMON = {
    "seed": ("int", 2020),
}
_DATA = {
    "market_csv": ("str", _REQUIRED),
    "yields_csv": ("str", _REQUIRED),
    "base_year": ("int", 2020),
    "loess_span": ("float", 0.75),
    "knot_spacing_years": ("int", 10),
}
_MODEL = {
    "states": ("str_list", []),  # empty = all states in the panel
    "tau_clamp_low": ("float", 0.001),
    "tau_clamp_high": ("float", 0.999),
}

SCHEMAS: dict[str, dict[str, tuple]] = {
    "detrend": {**_COMMON, **_DATA},
    "fit": {**_COMMON, **_DATA, **_MODEL},
    "sample": {
        **_COMMON, **_DATA, **_MODEL,
        "state": ("str", _REQUIRED),
        "year": ("int", _REQUIRED),
        "draws": ("int", 1000),
    },
    "correlate": {
        **_COMMON, **_DATA, **_MODEL,
        "draws": ("int", 1000),
        "jackknife_groups": ("int", 50),
        "jackknife": ("bool", True),
        "stock_grid_size": ("int", 25),
    },
    "premium": {
        **_COMMON, **_DATA, **_MODEL,
        "coverage_levels": ("float_list", [0.7, 0.85]),
        "draws": ("int", 1000),
    },
    "rating-game": {
        **_COMMON, **_DATA, **_MODEL,
        "coverage_levels": ("float_list", [0.7, 0.85]),
        "draws": ("int", 1000),
    },
    "simstudy": {
        **_COMMON,
        "modes": ("str_list", ["linear", "nonlinear"]),
        "years": ("int", 100),
        "counties_per_year": ("int", 500),
        "replicates": ("int", 100),
        "draws": ("int", 1000),
    },
}


# --- ingestion ----------------------------------------------------------------

def _read_rows(path, required):
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise IngestError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestError(f"{path}: empty file")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise IngestError(f"{path}: missing columns {', '.join(missing)}")
        rows = list(reader)
    if not rows:
        raise IngestError(f"{path}: no data rows")
    return rows


def ingest_market(path) -> MarketSeries:
    """Load and validate the national market series CSV."""
    rows = _read_rows(path, MARKET_COLUMNS)
    cols = {c: [] for c in MARKET_COLUMNS}
    acreage = []
    seen_years = set()
    for i, row in enumerate(rows, start=2):
        try:
            year = int(row["year"])
            if year in seen_years:
                raise IngestError(f"{path}: duplicate year {year}")
            seen_years.add(year)
            cols["year"].append(year)
            for c in MARKET_COLUMNS[1:]:
                value = float(row[c])
                if value <= 0.0:
                    raise IngestError(
                        f"{path} line {i}: column {c} must be positive, got {value}"
                    )
                cols[c].append(value)
            if row.get("acreage") not in (None, ""):
                acreage.append(float(row["acreage"]))
        except IngestError:
            raise
        except (TypeError, ValueError) as exc:
            raise IngestError(f"{path} line {i}: malformed row ({exc})") from exc
    order = np.argsort(cols["year"])
    arrays = {c: np.asarray(cols[c], dtype=float)[order] for c in MARKET_COLUMNS}
    years = arrays["year"].astype(int)
    gaps = [int(y) for y in range(years[0], years[-1]) if y not in seen_years]
    if gaps:
        logger.warning("%s: missing years %s", path, gaps)
    production = arrays["national_production"]
    if acreage:
        if len(acreage) != len(rows):
            raise IngestError(f"{path}: acreage column must be filled for every row")
        # per-acre yield column converted to production in stock units
        production = production * np.asarray(acreage, dtype=float)[order]
    try:
        return MarketSeries(
            year=years,
            harvest_price=arrays["harvest_price"],
            feb_futures=arrays["feb_futures"],
            implied_vol=arrays["implied_vol"],
            stocks=arrays["stocks"],
            national_production=production,
            gdp_deflator=arrays["gdp_deflator"],
        )
    except TrendError as exc:
        raise IngestError(f"{path}: {exc}") from exc


def ingest_yields(path) -> YieldPanel:
    """Load and validate the county yield panel CSV."""
    rows = _read_rows(path, YIELD_COLUMNS)
    years, states, counties, values = [], [], [], []
    for i, row in enumerate(rows, start=2):
        try:
            years.append(int(row["year"]))
            states.append(row["state"].strip())
            counties.append(row["county"].strip())
            value = float(row["yield"])
            if value < 0.0:
                raise IngestError(f"{path} line {i}: negative yield {value}")
            values.append(value)
        except IngestError:
            raise
        except (TypeError, ValueError, AttributeError) as exc:
            raise IngestError(f"{path} line {i}: malformed row ({exc})") from exc
    try:
        panel = YieldPanel(years, states, counties, values)
    except TrendError as exc:
        raise IngestError(f"{path}: {exc}") from exc
    for state in panel.states:
        sub = panel.for_state(state)
        logger.info(
            "%s: state %s, %d records over %d years",
            path, state, len(sub), len(set(sub.year.tolist())),
        )
    return panel


# --- shared pipeline pieces ---------------------------------------------------

@dataclass
class DetrendedData:
    """Everything downstream stages need, computed once per run."""

    market: MarketSeries
    panel: YieldPanel
    stocks_normalized: np.ndarray
    price_trend: object
    price_detrended: np.ndarray
    yield_trends: dict
    yield_detrended: dict  # state -> (records ndarray, year_index ndarray, sub panel)
    base_year: int

    def year_position(self, year) -> int:
        pos = int(np.searchsorted(self.market.year, year))
        if pos >= len(self.market) or self.market.year[pos] != year:
            raise ConfigError(f"year {year} not present in the market series")
        return pos


def build_detrended(market: MarketSeries, panel: YieldPanel, cfg) -> DetrendedData:
    t_index = market.time_index().astype(float)
    price_trend = fit_trend(
        t_index, np.log(market.harvest_price),
        knot_spacing_years=cfg["knot_spacing_years"],
    )
    p_til = detrend(market.harvest_price, t_index, price_trend, "log_price")
    s_til = normalize_stocks(market, span=cfg["loess_span"])

    year_to_pos = {int(y): i for i, y in enumerate(market.year)}
    yield_trends = {}
    yield_detrended = {}
    for state in panel.states:
        sub = panel.for_state(state)
        missing = sorted({int(y) for y in sub.year} - set(year_to_pos))
        if missing:
            raise IngestError(
                f"state {state}: yield years {missing} missing from the market series"
            )
        times = np.array([t_index[year_to_pos[int(y)]] for y in sub.year])
        model = fit_trend(
            times, sub.value, knot_spacing_years=cfg["knot_spacing_years"]
        )
        y_til = detrend(sub.value, times, model, "level_yield")
        year_ix = np.array([year_to_pos[int(y)] for y in sub.year], dtype=int)
        yield_trends[state] = model
        yield_detrended[state] = (y_til, year_ix, sub)
    return DetrendedData(
        market=market,
        panel=panel,
        stocks_normalized=s_til,
        price_trend=price_trend,
        price_detrended=p_til,
        yield_trends=yield_trends,
        yield_detrended=yield_detrended,
        base_year=cfg["base_year"],
    )


def _states_to_run(data: DetrendedData, cfg) -> list:
    wanted = cfg.get("states") or data.panel.states
    unknown = [s for s in wanted if s not in data.panel.states]
    if unknown:
        raise ConfigError(f"states not in the panel: {', '.join(unknown)}")
    return list(wanted)


def _fit_state_models(data: DetrendedData, state: str, cfg):
    y_til, year_ix, _ = data.yield_detrended[state]
    clamp = (cfg["tau_clamp_low"], cfg["tau_clamp_high"])
    conditional = fit_conditional(
        data.price_detrended, data.stocks_normalized, y_til, year_ix,
        tau_clamp=clamp,
    )
    unconditional = fit_unconditional(
        data.price_detrended, y_til, year_ix, tau_clamp=clamp,
    )
    return conditional, unconditional


def _base_index(data: DetrendedData) -> float:
    # base year may postdate the data; the trend evaluation clamps
    return float(data.base_year - int(data.market.year[0]) + 1)


# --- output helpers -----------------------------------------------------------

def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


class RunWriter:
    """Tracks written artifacts so failures leave no partial outputs."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.paths: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        p = os.path.join(self.out_dir, name)
        self.paths.append(p)
        return p

    def write_csv(self, name, header, rows):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])

    def write_json(self, name, payload):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    def cleanup(self):
        for p in self.paths:
            try:
                os.unlink(p)
            except OSError:
                pass


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(writer: RunWriter, command, config_text, cfg, seed, inputs=()):
    payload = {
        "command": command,
        "config": {k: (v if not isinstance(v, float) else repr(v)) for k, v in cfg.items()},
        "config_sha256": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        "seed": seed,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "input_digests": {os.path.basename(p): _file_digest(p) for p in inputs},
    }
    writer.write_json("manifest.json", payload)


# --- subcommands ----------------------------------------------------------------

def cmd_detrend(cfg, writer: RunWriter, workers: int):
    market = ingest_market(cfg["market_csv"])
    panel = ingest_yields(cfg["yields_csv"])
    data = build_detrended(market, panel, cfg)
    writer.write_csv(
        "detrended_market.csv",
        ["year", "stocks_normalized", "price_detrended", "log_price_trend"],
        [
            (int(y), s, p, tr)
            for y, s, p, tr in zip(
                market.year,
                data.stocks_normalized,
                data.price_detrended,
                data.price_trend.fitted(market.time_index().astype(float)),
            )
        ],
    )
    rows = []
    for state in panel.states:
        y_til, year_ix, sub = data.yield_detrended[state]
        trend = data.yield_trends[state]
        fitted = trend.fitted(market.time_index().astype(float)[year_ix])
        for yr, county, value, til, tr in zip(
            sub.year, sub.county, sub.value, y_til, fitted
        ):
            rows.append((int(yr), state, county, value, til, tr))
    writer.write_csv(
        "detrended_yields.csv",
        ["year", "state", "county", "yield", "yield_detrended", "yield_trend"],
        rows,
    )
    writer.write_json(
        "trends.json",
        {
            "price": {
                "lambda": data.price_trend.lam,
                "sigma2": data.price_trend.sigma2_hat,
                "n": data.price_trend.sample_count,
            },
            "yield_by_state": {
                s: {
                    "lambda": m.lam,
                    "sigma2": m.sigma2_hat,
                    "n": m.sample_count,
                }
                for s, m in data.yield_trends.items()
            },
        },
    )


def cmd_fit(cfg, writer: RunWriter, workers: int):
    market = ingest_market(cfg["market_csv"])
    panel = ingest_yields(cfg["yields_csv"])
    data = build_detrended(market, panel, cfg)
    tau_levels = (0.1, 0.25, 0.5, 0.75, 0.9)
    rows_price, rows_yield, model_info = [], [], {}
    for state in _states_to_run(data, cfg):
        cond, _ = _fit_state_models(data, state, cfg)
        lo, hi = cond.stock_support
        s_grid = np.linspace(lo, hi, 41)
        cols = [int(np.argmin(np.abs(cond.tau_grid - t))) for t in tau_levels]
        Xg = cond.price_spec.matrix([s_grid])
        curves = Xg @ cond.price_coefs[:, cols]
        for ti, tau in enumerate(tau_levels):
            smooth = smooth_curve(s_grid, curves[:, ti])
            for g, raw, sm in zip(s_grid, curves[:, ti], smooth):
                rows_price.append((state, tau, g, raw, sm))
        plo, phi = cond.price_support
        p_grid = np.linspace(plo, phi, 41)
        for sq in (0.25, 0.5, 0.75):
            st = float(np.quantile(data.stocks_normalized, sq))
            Q = cond.yield_quantile_lattice(st, p_grid)
            for ti, tau in enumerate(tau_levels):
                row = Q[cols[ti]]
                for g, raw in zip(p_grid, row):
                    rows_yield.append((state, tau, st, g, raw))
        model_info[state] = {
            "price_lambda": cond.price_lambda,
            "yield_lambda": cond.yield_lambda,
            "stock_support": list(cond.stock_support),
            "price_support": list(cond.price_support),
        }
    writer.write_csv(
        "price_quantile_curves.csv",
        ["state", "tau", "stocks_normalized", "quantile", "quantile_loess"],
        rows_price,
    )
    writer.write_csv(
        "yield_quantile_curves.csv",
        ["state", "tau", "stocks_normalized", "price_detrended", "quantile"],
        rows_yield,
    )
    writer.write_json("models.json", model_info)


def cmd_sample(cfg, writer: RunWriter, workers: int):
    market = ingest_market(cfg["market_csv"])
    panel = ingest_yields(cfg["yields_csv"])
    data = build_detrended(market, panel, cfg)
    state = cfg["state"]
    if state not in data.panel.states:
        raise ConfigError(f"state {state!r} not present in the panel")
    pos = data.year_position(cfg["year"])
    cond, _ = _fit_state_models(data, state, cfg)
    rng = substream(cfg["seed"], "sample", state, cfg["year"])
    draws = sample_conditional(
        cond, float(data.stocks_normalized[pos]), cfg["draws"], rng
    )
    t_index = float(market.time_index()[pos])
    deflator = float(market.gdp_deflator[pos])
    draws = retrend_and_rebase(
        draws, data.price_trend, data.yield_trends[state],
        t_index, _base_index(data), deflator, rng,
    )
    writer.write_csv(
        "draws.csv",
        [
            "draw", "tau_price", "tau_yield", "price_detrended",
            "yield_detrended", "price_rebased", "yield_rebased",
        ],
        [
            (r, tp, ty, pd, yd, pb, yb)
            for r, (tp, ty, pd, yd, pb, yb) in enumerate(
                zip(
                    draws.tau_price, draws.tau_yield,
                    draws.price_detrended, draws.yield_detrended,
                    draws.price_rebased, draws.yield_rebased,
                )
            )
        ],
    )
    writer.write_json(
        "sample_summary.json",
        {
            "state": state,
            "year": cfg["year"],
            "stocks_normalized": float(data.stocks_normalized[pos]),
            "clamp_fraction": draws.clamp_fraction,
            "draws": len(draws),
        },
    )


def _corr_jk_worker(reduced: YieldPanel, market, cfg, state, s_grid):
    """Jackknife refit: full pipeline on the reduced panel (module-level so
    it can cross process boundaries)."""
    d2 = build_detrended(market, reduced, cfg)
    curve, _ = _correlation_curve(d2, state, cfg, s_grid, "corr-jk")
    return curve


def _correlation_curve(data, state, cfg, s_grid, rng_tag, with_sd=False):
    """Conditional correlation at each grid stock level, plus unconditional."""
    cond, uncond = _fit_state_models(data, state, cfg)
    lo, hi = cond.stock_support
    grid = np.clip(s_grid, lo, hi)
    t_index = float(np.median(data.market.time_index()))
    deflator = 1.0
    cond_corr = np.empty(grid.size)
    cond_sd = np.empty(grid.size)
    for i, st in enumerate(grid):
        rng = substream(cfg["seed"], rng_tag, state, "cond", i)
        draws = sample_conditional(cond, float(st), cfg["draws"], rng)
        draws = retrend_and_rebase(
            draws, data.price_trend, data.yield_trends[state],
            t_index, _base_index(data), deflator, rng,
        )
        m = moments_from_draws(draws)
        cond_corr[i] = m.corr
        cond_sd[i] = m.sd_price
    rng = substream(cfg["seed"], rng_tag, state, "uncond")
    udraws = sample_conditional(uncond, np.nan, cfg["draws"], rng)
    udraws = retrend_and_rebase(
        udraws, data.price_trend, data.yield_trends[state],
        t_index, _base_index(data), deflator, rng,
    )
    um = moments_from_draws(udraws)
    if with_sd:
        return cond_corr, um.corr, cond_sd, um.sd_price
    return cond_corr, um.corr


def cmd_correlate(cfg, writer: RunWriter, workers: int):
    market = ingest_market(cfg["market_csv"])
    panel = ingest_yields(cfg["yields_csv"])
    data = build_detrended(market, panel, cfg)
    rows = []
    ar1_rows = []
    for state in _states_to_run(data, cfg):
        s_obs = data.stocks_normalized
        s_grid = np.linspace(
            float(np.min(s_obs)), float(np.max(s_obs)), cfg["stock_grid_size"]
        )
        cond_corr, uncond_corr, cond_sd, uncond_sd = _correlation_curve(
            data, state, cfg, s_grid, "corr", with_sd=True
        )
        if cfg["jackknife"]:
            from functools import partial

            _, _, sub = data.yield_detrended[state]
            pipeline = partial(
                _corr_jk_worker, market=market, cfg=cfg, state=state, s_grid=s_grid
            )
            var = jackknife_variance(
                sub, pipeline, B=cfg["jackknife_groups"], workers=workers
            )
            band = 1.96 * np.sqrt(np.maximum(var, 0.0))
        else:
            band = np.full(s_grid.size, np.nan)
        smooth = smooth_curve(s_grid, cond_corr)
        sd_smooth = smooth_curve(s_grid, cond_sd)
        for i, st in enumerate(s_grid):
            rows.append(
                (
                    state, st, cond_corr[i], smooth[i],
                    cond_corr[i] - band[i], cond_corr[i] + band[i],
                    uncond_corr, cond_sd[i], sd_smooth[i], uncond_sd,
                )
            )
        y_til, _, sub = data.yield_detrended[state]
        try:
            ar1 = fit_ar1(sub.year, sub.county, y_til, state=state)
            ar1_rows.append(
                (state, ar1.rho0, ar1.rho1, ar1.ci95[0], ar1.ci95[1], ar1.n_pairs)
            )
        except Exception as exc:
            logger.warning("AR-1 fit failed for %s: %s", state, exc)
    writer.write_csv(
        "correlation_curves.csv",
        [
            "state", "stocks_normalized", "corr_conditional", "corr_conditional_loess",
            "band_low", "band_high", "corr_unconditional",
            "sd_price_conditional", "sd_price_conditional_loess",
            "sd_price_unconditional",
        ],
        rows,
    )
    writer.write_csv(
        "yield_ar1.csv",
        ["state", "rho0", "rho1", "ci_low", "ci_high", "n_pairs"],
        ar1_rows,
    )


def _county_aph(sub: YieldPanel) -> dict:
    """Trailing mean of up to ten prior observed years per (county, year)."""
    by_county: dict = {}
    for yr, county, value in zip(sub.year, sub.county, sub.value):
        by_county.setdefault(county, []).append((int(yr), float(value)))
    aph = {}
    for county, recs in by_county.items():
        recs.sort()
        years = [r[0] for r in recs]
        values = [r[1] for r in recs]
        for i, yr in enumerate(years):
            prior = [v for y, v in zip(years[:i], values[:i]) if yr - 10 <= y < yr]
            if prior:
                aph[(county, yr)] = float(np.mean(prior))
    return aph


def _premium_table(data: DetrendedData, cfg, states, psi_list):
    """Per (state, county, year, psi, method) simulated premiums."""
    channels = fit_stock_channels(data.market, data.stocks_normalized)
    rows = []
    skipped = 0
    for state in states:
        cond, uncond = _fit_state_models(data, state, cfg)
        y_til, year_ix, sub = data.yield_detrended[state]
        aph = _county_aph(sub)
        for pos, year in enumerate(data.market.year):
            year = int(year)
            counties = sorted(
                {c for c, y in zip(sub.county, sub.year) if int(y) == year}
            )
            if not counties:
                continue
            st = float(data.stocks_normalized[pos])
            t_index = float(data.market.time_index()[pos])
            for county in counties:
                bar_y = aph.get((county, year))
                if bar_y is None:
                    skipped += 1
                    continue
                for psi in psi_list:
                    pc = PremiumConfig(coverage=float(psi), aph_yield=bar_y)
                    for kind, model in (
                        ("three_channel", cond), ("two_channel", uncond)
                    ):
                        rng = substream(
                            cfg["seed"], "premium", state, county, year, psi, kind
                        )
                        res = simulate_premium(
                            kind, model, channels, data.price_trend,
                            data.yield_trends[state], pc, st, t_index,
                            cfg["draws"], rng,
                        )
                        rows.append(
                            (state, county, year, float(psi), kind, res.premium)
                        )
    if skipped:
        logger.info("premium: skipped %d county-years with no APH history", skipped)
    return rows


def cmd_premium(cfg, writer: RunWriter, workers: int):
    market = ingest_market(cfg["market_csv"])
    panel = ingest_yields(cfg["yields_csv"])
    data = build_detrended(market, panel, cfg)
    states = _states_to_run(data, cfg)
    rows = _premium_table(data, cfg, states, cfg["coverage_levels"])
    writer.write_csv(
        "premiums.csv",
        ["state", "county", "year", "coverage", "method", "premium"],
        rows,
    )


def cmd_rating_game(cfg, writer: RunWriter, workers: int):
    market = ingest_market(cfg["market_csv"])
    panel = ingest_yields(cfg["yields_csv"])
    data = build_detrended(market, panel, cfg)
    states = _states_to_run(data, cfg)
    prem_rows = _premium_table(data, cfg, states, cfg["coverage_levels"])
    prem = {}
    for state, county, year, psi, kind, value in prem_rows:
        prem[(state, county, year, psi, kind)] = value
    year_pos = {int(y): i for i, y in enumerate(market.year)}
    game_rows = []
    summary = {}
    for state in states:
        _, _, sub = data.yield_detrended[state]
        aph = _county_aph(sub)
        for psi in cfg["coverage_levels"]:
            years, inds, p3s, p2s = [], [], [], []
            for yr, county, value in zip(sub.year, sub.county, sub.value):
                yr = int(yr)
                key3 = (state, county, yr, float(psi), "three_channel")
                key2 = (state, county, yr, float(psi), "two_channel")
                bar_y = aph.get((county, yr))
                if bar_y is None or key3 not in prem or key2 not in prem:
                    continue
                pos = year_pos[yr]
                realized = indemnity(
                    float(psi),
                    float(market.feb_futures[pos]),
                    bar_y,
                    float(market.harvest_price[pos]),
                    float(value),
                )
                years.append(yr)
                inds.append(realized)
                p3s.append(prem[key3])
                p2s.append(prem[key2])
            if not years:
                continue
            res = rating_game(np.array(years), inds, p3s, p2s)
            summary[f"{state}|{psi:g}"] = {
                "d_star": res.d_star,
                "effective_years": res.effective_years,
                "excluded_years": res.excluded_years,
                "p_value": res.p_value,
            }
            for yr, d in zip(res.years, res.d_values):
                game_rows.append((state, float(psi), int(yr), d))
    writer.write_csv(
        "rating_game_years.csv", ["state", "coverage", "year", "d_value"], game_rows
    )
    writer.write_json("rating_game_summary.json", summary)


def cmd_simstudy(cfg, writer: RunWriter, workers: int):
    for mode in cfg["modes"]:
        sim = SimConfig(
            T=cfg["years"],
            n_t=cfg["counties_per_year"],
            M=cfg["replicates"],
            R=cfg["draws"],
            price_mode=mode,
            seed=cfg["seed"],
        )
        out = run_joint_study(sim, workers=workers, out_dir=writer.out_dir)
        writer.paths.append(
            os.path.join(writer.out_dir, f"quantile_curves_{mode}.csv")
        )
        writer.paths.append(os.path.join(writer.out_dir, f"mise_{mode}.json"))
        logger.info("simstudy %s: %s", mode, out["summary"]["mise_by_stock"])


COMMANDS = {
    "detrend": cmd_detrend,
    "fit": cmd_fit,
    "sample": cmd_sample,
    "correlate": cmd_correlate,
    "premium": cmd_premium,
    "rating-game": cmd_rating_game,
    "simstudy": cmd_simstudy,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sqr",
        description="Stock-conditioned crop price/yield estimation and rating",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            config_text = fh.read()
        raw = parse_config_text(config_text)
        cfg = resolve_config(raw, SCHEMAS[args.command])
        if args.seed is not None:
            cfg["seed"] = args.seed
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = args.out or os.path.join("sqr_out", args.command)
    writer = RunWriter(out_dir)
    inputs = [cfg[k] for k in ("market_csv", "yields_csv") if k in cfg]
    try:
        COMMANDS[args.command](cfg, writer, args.workers)
        write_manifest(writer, args.command, config_text, cfg, cfg["seed"], inputs)
    except (ConfigError,) as exc:
        writer.cleanup()
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestError as exc:
        writer.cleanup()
        print(f"ingestion error [{args.command}]: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except Exception as exc:  # numeric/pipeline failure
        writer.cleanup()
        print(f"pipeline error [{args.command}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
