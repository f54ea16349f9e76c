"""Candidate pools and reference-class selection for one initial case."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .forecast import EmpiricalDistribution, quantiles
from .panel import Panel
from .predictors import PanelTables, PredictorId

METHODS = ("similarity", "mauboussin", "major_group", "industry_group")
SKIP_REASONS = ("window", "no_outcome", "predictor_missing", "no_candidates", "class_too_small")
MAUBOUSSIN_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99)


class SkipCase(Exception):
    """The initial case yields no usable reference class; ``reason`` is one of SKIP_REASONS."""

    def __init__(self, reason: str, detail: str = ""):
        assert reason in SKIP_REASONS, reason
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class ClassParams:
    predictor: PredictorId
    horizon: int
    window: int
    size: float | None = None
    method: str = "similarity"
    min_class: int = 20

    def __post_init__(self):
        if isinstance(self.predictor, str):
            object.__setattr__(self, "predictor", PredictorId.parse(self.predictor))
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.horizon < 1 or self.window < 1:
            raise ValueError("horizon and window must be positive")
        if self.min_class < 1:
            raise ValueError("min_class must be positive")
        if self.method == "similarity":
            if self.size is None or not 0 < self.size <= 1:
                raise ValueError("similarity classes need a size in (0, 1]")
            if self.predictor.is_group:
                raise ValueError(f"{self.predictor} is categorical; use the group method")
        else:
            if self.size is not None:
                raise ValueError(f"{self.method} takes no size")
            expected = "sales" if self.method == "mauboussin" else self.method
            if self.predictor.name != expected:
                raise ValueError(f"{self.method} requires predictor {expected!r}")

    def half_size(self, n_candidates: int) -> int:
        """floor(c * N / 2), computed on the decimal value of c."""
        return math.floor(Fraction(str(self.size)) * n_candidates / 2)

    def first_case_year(self, start_year: int) -> int:
        return start_year + self.window + self.horizon - 1

    def sort_key(self) -> tuple:
        return (self.horizon, METHODS.index(self.method), self.predictor.name, self.window,
                -1.0 if self.size is None else self.size)

    def describe(self) -> str:
        size = "--" if self.size is None else f"{self.size:g}"
        return f"{self.predictor.name} [{self.method}] h={self.horizon} w={self.window} c={size}"


@dataclass(frozen=True)
class Case:
    """An initial case; ``firm_id`` is None for artificial cases."""

    firm_id: str | None
    year: int
    x: float


@dataclass(frozen=True)
class CandidatePool:
    """Candidate observations sorted ascending by (x, year, firm)."""

    firm_code: np.ndarray
    year: np.ndarray
    x: np.ndarray
    y: np.ndarray
    firm_ids: np.ndarray  # lookup table code -> firm_id

    def __len__(self) -> int:
        return len(self.x)

    def take(self, idx) -> CandidatePool:
        return CandidatePool(self.firm_code[idx], self.year[idx], self.x[idx], self.y[idx], self.firm_ids)

    @property
    def firm(self) -> np.ndarray:
        return self.firm_ids[self.firm_code]

    def keys(self) -> set[tuple[str, int]]:
        return set(zip(self.firm.tolist(), self.year.tolist()))


@dataclass(frozen=True)
class ReferenceClass:
    members: CandidatePool
    initial_case: Case
    params: ClassParams

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def distribution(self) -> EmpiricalDistribution:
        return EmpiricalDistribution.from_values(self.members.y)


def _sorted_pool(panel: Panel, rows: np.ndarray, x: np.ndarray, y: np.ndarray) -> CandidatePool:
    codes = panel.firm_code[rows]
    years = panel.years[rows]
    xs = x[rows]
    order = np.lexsort((codes, years, xs))
    return CandidatePool(codes[order], years[order], xs[order], y[rows][order], panel.firm_ids)


def case_for(tables: PanelTables, firm_id: str, year: int, params: ClassParams) -> Case:
    """Initial case (firm_id, year) with its predictor value (NaN when missing)."""
    if tables.panel.row(firm_id, year) is None:
        raise KeyError(f"no record for firm {firm_id!r} in {year}")
    x = tables.predictors.get(firm_id, year, params.predictor)
    return Case(firm_id, int(year), float("nan") if x is None else float(x))


def collect_candidates(panel: Panel, tables: PanelTables, case: Case, params: ClassParams,
                       exclude_self: bool = False) -> CandidatePool:
    """All (j, s) with t-h-w+1 <= s <= t-h whose predictor and h-year outcome exist."""
    first = case.year - params.horizon - params.window + 1
    last = case.year - params.horizon
    if first < panel.start_year:
        raise SkipCase("window", f"window starts {first}, panel starts {panel.start_year}")
    x = tables.predictors.values(params.predictor)
    y = tables.outcomes.values(params.horizon)
    mask = (panel.years >= first) & (panel.years <= last) & ~np.isnan(x) & ~np.isnan(y)
    if exclude_self and case.firm_id is not None:
        mask &= panel.frame["firm_id"].to_numpy() != case.firm_id
    rows = np.flatnonzero(mask)
    if len(rows) == 0:
        raise SkipCase("no_candidates")
    return _sorted_pool(panel, rows, x, y)


class PoolBuilder:
    """Per-year candidate pools for one (predictor, horizon), built from a year-sorted row list.

    Read-only after construction, so one builder can serve many threads.
    """

    def __init__(self, panel: Panel, tables: PanelTables, predictor: PredictorId, horizon: int):
        self.panel = panel
        self.x = tables.predictors.values(predictor)
        self.y = tables.outcomes.values(horizon)
        rows = np.flatnonzero(~np.isnan(self.x) & ~np.isnan(self.y))
        self.rows = rows[np.argsort(panel.years[rows], kind="stable")]
        self.row_years = panel.years[self.rows]
        self.horizon = horizon

    def pool(self, t: int, window: int) -> CandidatePool:
        lo = np.searchsorted(self.row_years, t - self.horizon - window + 1, side="left")
        hi = np.searchsorted(self.row_years, t - self.horizon, side="right")
        return _sorted_pool(self.panel, self.rows[lo:hi], self.x, self.y)


# -- selection ---------------------------------------------------------------

def similarity_start(pos, n_half: int, n: int):
    """First member position: n_half below the insertion point, shifted inside [0, n - 2*n_half]."""
    return np.clip(np.asarray(pos) - n_half, 0, n - 2 * n_half)


def insertion_position(sorted_x: np.ndarray, x):
    # The case year exceeds every candidate year, so it sorts after equal values.
    return np.searchsorted(sorted_x, x, side="right")


def select_similarity_class(pool: CandidatePool, case: Case, params: ClassParams) -> ReferenceClass:
    """Take the n_half candidates just below and just above the case's value.

    n_half = floor(c * N / 2). Near a tail the missing members come from the
    other side, so the class is the top or bottom 2 * n_half candidates.
    """
    if math.isnan(case.x):
        raise SkipCase("predictor_missing")
    if len(pool) == 0:
        raise SkipCase("no_candidates")
    n_half = params.half_size(len(pool))
    if 2 * n_half < params.min_class:
        raise SkipCase("class_too_small", f"{2 * n_half} < {params.min_class}")
    start = int(similarity_start(insertion_position(pool.x, case.x), n_half, len(pool)))
    return ReferenceClass(pool.take(slice(start, start + 2 * n_half)), case, params)


def mauboussin_boundaries(sorted_sales: np.ndarray) -> np.ndarray:
    """Decile cut points plus the 99% point of the pool's sales."""
    return quantiles(sorted_sales, MAUBOUSSIN_LEVELS)


def mauboussin_bucket(boundaries: np.ndarray, sales):
    """Bucket 0..10 for each value; buckets are right-closed, bucket 10 is the top percentile."""
    return np.searchsorted(boundaries, sales, side="left")


def select_mauboussin_class(pool: CandidatePool, case: Case, params: ClassParams) -> ReferenceClass:
    if math.isnan(case.x):
        raise SkipCase("predictor_missing")
    if len(pool) == 0:
        raise SkipCase("no_candidates")
    bounds = mauboussin_boundaries(pool.x)
    members = np.flatnonzero(mauboussin_bucket(bounds, pool.x) == mauboussin_bucket(bounds, case.x))
    if len(members) < params.min_class:
        raise SkipCase("class_too_small", f"{len(members)} < {params.min_class}")
    return ReferenceClass(pool.take(members), case, params)


def select_group_class(pool: CandidatePool, case: Case, params: ClassParams) -> ReferenceClass:
    if math.isnan(case.x):
        raise SkipCase("predictor_missing", "case has no SIC")
    if len(pool) == 0:
        raise SkipCase("no_candidates")
    members = np.flatnonzero(pool.x == case.x)
    if len(members) < params.min_class:
        raise SkipCase("class_too_small", f"{len(members)} < {params.min_class}")
    return ReferenceClass(pool.take(members), case, params)


def select_class(pool: CandidatePool, case: Case, params: ClassParams) -> ReferenceClass:
    if params.method == "similarity":
        return select_similarity_class(pool, case, params)
    if params.method == "mauboussin":
        return select_mauboussin_class(pool, case, params)
    return select_group_class(pool, case, params)


def build_class(tables: PanelTables, firm_id: str, year: int, params: ClassParams,
                exclude_self: bool = False) -> ReferenceClass:
    """Reference class for a real (firm, year); its own outcome need not exist yet."""
    case = case_for(tables, firm_id, year, params)
    if math.isnan(case.x):
        raise SkipCase("predictor_missing")
    pool = collect_candidates(tables.panel, tables, case, params, exclude_self)
    return select_class(pool, case, params)
