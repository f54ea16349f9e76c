"""Synthetic panels with a known growth mechanism, and a brute-force class oracle.

The generating predictor is the operating margin: each firm's margin follows
an AR(1) around a cross-sectional mean that may drift over the years, and the
next year's sales growth is ``g(margin) + sigma(margin) * eps`` with ``g``
piecewise linear and ``sigma`` optionally v-shaped. ``beta`` carries an
independent AR(1) that has no influence on growth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import pandas as pd
from scipy.stats import norm

from .panel import IngestOptions, Panel, _finalize
from .predictors import PanelTables, build_tables
from .refclass import CandidatePool, Case, ClassParams, ReferenceClass, SkipCase

GENERATING_PREDICTOR = "operating_margin"
NOISE_PREDICTOR = "beta"
SIC_CODES = (1311, 2011, 2834, 2836, 2899, 3571, 3572, 3674, 4813, 5311, 5812, 7372, 7373, 8062)


@dataclass(frozen=True)
class SynthSpec:
    n_firms: int = 2000
    n_years: int = 50
    start_year: int = 1950
    seed: int = 7
    margin_mean: float = 5.0       # cross-sectional mean margin in the first year (%)
    margin_drift: float = 0.15     # change of that mean per year (pp)
    persistence: float = 0.8
    margin_noise: float = 4.0      # AR(1) innovation sd (pp)
    knots_x: tuple[float, ...] = (-30.0, -10.0, 0.0, 10.0, 20.0, 40.0)
    knots_y: tuple[float, ...] = (-15.0, -6.0, 1.0, 7.0, 11.0, 18.0)
    sigma_base: float = 8.0
    sigma_slope: float = 0.0       # > 0 gives a v-shaped noise scale around sigma_center
    sigma_center: float = 5.0
    death_rate: float = 0.0

    def validate(self) -> None:
        if self.n_firms < 2 or self.n_years < 2:
            raise ValueError("need at least 2 firms and 2 years")
        if not abs(self.persistence) < 1:
            raise ValueError("AR(1) persistence must lie in (-1, 1)")
        if self.margin_noise <= 0 or self.sigma_base <= 0 or self.sigma_slope < 0:
            raise ValueError("noise scales must be positive")
        kx, ky = np.asarray(self.knots_x), np.asarray(self.knots_y)
        if len(kx) < 2 or len(kx) != len(ky) or np.any(np.diff(kx) <= 0) or np.any(np.diff(ky) < 0):
            raise ValueError("mechanism knots must be increasing in x and non-decreasing in y")
        if not 0 <= self.death_rate < 1:
            raise ValueError("death_rate must be in [0, 1)")

    def location(self, x):
        return np.interp(x, self.knots_x, self.knots_y)

    def scale(self, x):
        return self.sigma_base + self.sigma_slope * np.abs(np.asarray(x) - self.sigma_center)

    def true_cdf(self, x, y):
        """P(next-year growth <= y | margin = x); growth is truncated at -100."""
        y = np.asarray(y, dtype=float)
        p = norm.cdf((y - self.location(x)) / self.scale(x))
        return np.where(y < -100.0, 0.0, p)


@dataclass
class SynthPanel:
    spec: SynthSpec
    panel: Panel
    tables: PanelTables
    generated_growth: np.ndarray  # next-year growth drawn for each panel row, NaN if none

    def true_pit(self) -> np.ndarray:
        """True conditional CDF at the realized one-year outcome, for rows that have one."""
        x = self.tables.predictors.values(GENERATING_PREDICTOR)
        y = self.tables.outcomes.values(1)
        ok = ~np.isnan(x) & ~np.isnan(y)
        return self.spec.true_cdf(x[ok], y[ok])


def _simulate(spec: SynthSpec) -> pd.DataFrame:
    rng = np.random.default_rng(spec.seed)
    n, T = spec.n_firms, spec.n_years
    stat_sd = spec.margin_noise / math.sqrt(1 - spec.persistence ** 2)
    z = rng.normal(0.0, stat_sd, n)
    b = rng.normal(0.0, 0.5, n)
    sales = np.exp(rng.normal(math.log(100.0), 1.0, n))
    asset_ratio = np.exp(rng.normal(0.0, 0.3, n))
    sic = rng.choice(SIC_CODES, size=n)
    alive = np.ones(n, dtype=bool)
    frames = []
    for k in range(T):
        year = spec.start_year + k
        margin = spec.margin_mean + spec.margin_drift * k + z
        beta = 1.0 + b
        growth = spec.location(margin) + spec.scale(margin) * rng.normal(size=n)
        growth = np.maximum(growth, -100.0)
        assets = sales * asset_ratio
        frames.append(pd.DataFrame({
            "firm_id": [f"S{i:05d}" for i in np.flatnonzero(alive)],
            "fiscal_year": year,
            "fye_month": 12,
            "sales": sales[alive],
            "ebit": (margin * sales / 100.0)[alive],
            "total_assets": assets[alive],
            "shareholder_equity": 0.4 * assets[alive],
            "sic": sic[alive],
            "beta": beta[alive],
            "pe_ratio": np.nan,
            "pb_ratio": np.nan,
            "_growth": np.where(k + 1 < T, growth, np.nan)[alive],
        }))
        z = spec.persistence * z + rng.normal(0.0, spec.margin_noise, n)
        b = spec.persistence * b + rng.normal(0.0, 0.5 * math.sqrt(1 - spec.persistence ** 2), n)
        sales = sales * (1.0 + growth / 100.0)
        if spec.death_rate:
            alive &= rng.random(n) >= spec.death_rate
    frame = pd.concat(frames, ignore_index=True)
    frame["sic"] = frame["sic"].astype("Int64")
    return frame


def generate_panel(spec: SynthSpec | None = None) -> SynthPanel:
    """Simulate a panel; deterministic for a given spec (including its seed)."""
    spec = spec or SynthSpec()
    spec.validate()
    frame = _simulate(spec)
    last_year = frame.groupby("firm_id")["fiscal_year"].transform("max")
    frame.loc[frame["fiscal_year"] == last_year, "_growth"] = np.nan
    panel = _finalize(frame, IngestOptions(), "synthetic", None)
    growth = panel.frame.pop("_growth").to_numpy(dtype=float)
    return SynthPanel(spec, panel, build_tables(panel), growth)


def oracle_class(pool: CandidatePool, case: Case, params: ClassParams) -> ReferenceClass:
    """Slow reference implementation of the similarity rule, for tests.

    Re-sorts the candidates as Python tuples, finds the case's slot by a
    linear scan, then walks outward collecting members one at a time.
    """
    if math.isnan(case.x):
        raise SkipCase("predictor_missing")
    if len(pool) == 0:
        raise SkipCase("no_candidates")
    entries = sorted(zip(pool.x.tolist(), pool.year.tolist(), pool.firm.tolist(), range(len(pool))))
    n = len(entries)
    n_half = math.floor(Fraction(str(params.size)) * n / 2)
    if 2 * n_half < params.min_class:
        raise SkipCase("class_too_small")
    slot = 0
    for x, s, _, _ in entries:
        if (x, s) < (case.x, case.year):
            slot += 1
    chosen = []
    down, up = slot - 1, slot
    taken_below = taken_above = 0
    while taken_below < n_half and down >= 0:
        chosen.append(entries[down][3])
        down -= 1
        taken_below += 1
    while taken_above < n_half and up < n:
        chosen.append(entries[up][3])
        up += 1
        taken_above += 1
    while len(chosen) < 2 * n_half:
        if taken_below < n_half:  # short below: keep walking up
            chosen.append(entries[up][3])
            up += 1
        else:
            chosen.append(entries[down][3])
            down -= 1
    idx = np.sort(np.asarray(chosen, dtype=np.int64))
    return ReferenceClass(pool.take(idx), case, params)
