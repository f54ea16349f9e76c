"""PIT goodness-of-fit scores, backtests over initial cases, and grid ranking."""

from __future__ import annotations

import math
import multiprocessing
import os
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .forecast import pit_evaluate, quantiles, trimmed_mean, trimmed_std
from .panel import Panel
from .predictors import GROUP_PREDICTORS, SIMILARITY_PREDICTORS, PanelTables, PredictorId
from .refclass import (
    Case,
    ClassParams,
    PoolBuilder,
    SkipCase,
    collect_candidates,
    insertion_position,
    mauboussin_boundaries,
    mauboussin_bucket,
    select_class,
    select_similarity_class,
    similarity_start,
)

QUANTILE_LEVELS = (0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95, 0.99)
MEASURES = ("delta_q", "ks", "cvm")
RESULT_COLUMNS = [
    "predictor", "window", "size", "method", "horizon", "m",
    "delta_q", "delta_q_rank", "ks", "ks_rank", "cvm", "cvm_rank",
    "skipped_small", "skipped_window", "skipped_missing",
]
# memory cap for the (cases x class size) gather in the similarity path
_GATHER_CELLS = 2_000_000


@dataclass
class PitSample:
    params: ClassParams | None
    values: np.ndarray
    skipped: dict[str, int] = field(default_factory=dict)
    case_rows: np.ndarray | None = None
    audit: dict[str, int] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.values) and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("PIT values must lie in [0, 1]")

    @property
    def m(self) -> int:
        return len(self.values)


def _pits(sample) -> np.ndarray:
    values = sample.values if isinstance(sample, PitSample) else np.asarray(sample, dtype=float)
    if len(values) == 0:
        raise ValueError("empty PIT sample")
    return np.sort(values)


def ks_statistic(sample) -> float:
    """sqrt(m) * sup_x |F_m(x) - x| against the uniform on [0, 1]."""
    p = _pits(sample)
    m = len(p)
    i = np.arange(1, m + 1)
    d = max(np.max(i / m - p), np.max(p - (i - 1) / m))
    return math.sqrt(m) * float(d)


def cvm_statistic(sample) -> float:
    """m * integral (F_m(x) - x)^2 dx, via the order-statistic closed form."""
    p = _pits(sample)
    m = len(p)
    i = np.arange(1, m + 1)
    return 1.0 / (12 * m) + float(np.sum((p - (2 * i - 1) / (2 * m)) ** 2))


def quantile_deviation(sample, levels: Sequence[float] = QUANTILE_LEVELS) -> float:
    """Sum over the levels of |PIT sample quantile - level|."""
    p = _pits(sample)
    if len(p) < 2:
        raise ValueError("quantile deviation needs at least two PIT values")
    return float(np.sum(np.abs(quantiles(p, levels) - np.asarray(levels))))


def mean_quantile_deviation_pp(delta_q: float, n_levels: int = len(QUANTILE_LEVELS)) -> float:
    """Average absolute quantile miss in percentage points."""
    return 100.0 * delta_q / n_levels


@dataclass
class GofScores:
    delta_quantiles: float
    ks: float
    cvm: float
    ranks: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_sample(cls, sample) -> GofScores:
        m = len(sample.values if isinstance(sample, PitSample) else sample)
        if m < 2:
            return cls(math.nan, math.nan, math.nan)
        return cls(quantile_deviation(sample), ks_statistic(sample), cvm_statistic(sample))


# -- backtest ------------------------------------------------------------------

def _year_similarity(pool, xs, ys, t, params, audit):
    """PIT values for all cases of one year against the shared sorted pool."""
    n = len(pool)
    n_half = params.half_size(n)
    size = 2 * n_half
    if size < params.min_class:
        return None, "class_too_small", 0
    start = similarity_start(insertion_position(pool.x, xs), n_half, n)
    out = np.empty(len(xs))
    violations = 0
    offsets = np.arange(size)
    step = max(1, _GATHER_CELLS // size)
    for lo in range(0, len(xs), step):
        idx = start[lo:lo + step, None] + offsets
        out[lo:lo + step] = (pool.y[idx] <= ys[lo:lo + step, None]).sum(axis=1) / size
        if audit:
            violations += int((pool.year[idx].max(axis=1) + params.horizon > t).sum())
    return out, None, violations


def _year_buckets(pool, xs, ys, t, params, audit):
    """PIT values for all cases of one year when classes partition the pool."""
    if params.method == "mauboussin":
        bounds = mauboussin_boundaries(pool.x)
        pool_b = mauboussin_bucket(bounds, pool.x)
        case_b = mauboussin_bucket(bounds, xs)
    else:
        pool_b, case_b = pool.x, xs
    out = np.full(len(xs), np.nan)
    violations = 0
    for b in np.unique(case_b):
        members = pool_b == b
        cases = case_b == b
        n = int(members.sum())
        if n < params.min_class:
            continue
        outcomes = np.sort(pool.y[members])
        out[cases] = np.searchsorted(outcomes, ys[cases], side="right") / n
        if audit and pool.year[members].max() + params.horizon > t:
            violations += int(cases.sum())
    return out, violations


def _year_task(builder: PoolBuilder, params: ClassParams, t: int, rows: np.ndarray,
               x: np.ndarray, y: np.ndarray, audit: bool):
    counts: Counter = Counter()
    pool = builder.pool(t, params.window)
    xs, ys = x[rows], y[rows]
    if len(pool) == 0:
        counts["no_candidates"] += len(rows)
        return np.empty(0), rows[:0], counts, 0, 0
    if params.method == "similarity":
        pits, reason, violations = _year_similarity(pool, xs, ys, t, params, audit)
        if pits is None:
            counts[reason] += len(rows)
            return np.empty(0), rows[:0], counts, 0, 0
        return pits, rows, counts, len(rows), violations
    pits, violations = _year_buckets(pool, xs, ys, t, params, audit)
    kept = ~np.isnan(pits)
    counts["class_too_small"] += int((~kept).sum())
    return pits[kept], rows[kept], counts, int(kept.sum()), violations


def _slow_year_task(panel, tables, params, t, rows, x, y, exclude_self, audit):
    """Case-by-case path (used with exclude_self, where pools differ per firm)."""
    counts: Counter = Counter()
    pits, kept = [], []
    violations = 0
    firm_ids = panel.frame["firm_id"].to_numpy()
    for r in rows:
        case = Case(firm_ids[r], t, float(x[r]))
        try:
            pool = collect_candidates(panel, tables, case, params, exclude_self)
            cls = select_class(pool, case, params)
        except SkipCase as skip:
            counts[skip.reason] += 1
            continue
        pits.append(pit_evaluate(cls.distribution, y[r]))
        kept.append(r)
        if audit and cls.members.year.max() + params.horizon > t:
            violations += 1
    kept = np.asarray(kept, dtype=np.int64)
    return np.asarray(pits, dtype=float), kept, counts, len(kept), violations


def run_backtest(panel: Panel, tables: PanelTables, params: ClassParams, *,
                 exclude_self: bool = False, threads: int = 1, audit: bool = False) -> PitSample:
    """Evaluate every admissible (firm, t) as an initial case and collect its PIT value.

    A case needs the full candidate window inside the panel, a realized
    h-year outcome (so t + h <= end year and the firm still present), its
    predictor value, and a class of at least ``params.min_class`` members.
    Every other case is counted under its skip reason. Values come back in
    (year, firm) order whatever the thread count.
    """
    h, w = params.horizon, params.window
    x = tables.predictors.values(params.predictor)
    y = tables.outcomes.values(h)
    years = panel.years
    window_ok = years - h - w + 1 >= panel.start_year
    has_y = ~np.isnan(y)
    has_x = ~np.isnan(x)
    skipped = Counter({
        "window": int((~window_ok).sum()),
        "no_outcome": int((window_ok & ~has_y).sum()),
        "predictor_missing": int((window_ok & has_y & ~has_x).sum()),
    })
    eligible = np.flatnonzero(window_ok & has_y & has_x)
    eligible = eligible[np.lexsort((panel.firm_code[eligible], years[eligible]))]
    case_years = years[eligible]
    bounds = np.flatnonzero(np.diff(case_years)) + 1
    groups = list(zip(np.split(case_years, bounds), np.split(eligible, bounds))) if len(eligible) else []

    if exclude_self:
        def task(item):
            yrs, rows = item
            return _slow_year_task(panel, tables, params, int(yrs[0]), rows, x, y, True, audit)
    else:
        builder = PoolBuilder(panel, tables, params.predictor, h)

        def task(item):
            yrs, rows = item
            return _year_task(builder, params, int(yrs[0]), rows, x, y, audit)

    if threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(task, groups))
    else:
        parts = [task(g) for g in groups]

    values, rows = [np.empty(0)], [np.empty(0, dtype=np.int64)]
    n_classes = n_violations = 0
    for pits, kept, counts, classes, violations in parts:
        values.append(pits)
        rows.append(kept)
        skipped.update(counts)
        n_classes += classes
        n_violations += violations
    result = {reason: int(skipped.get(reason, 0)) for reason in
              ("window", "no_outcome", "predictor_missing", "no_candidates", "class_too_small")}
    return PitSample(params, np.concatenate(values), result, np.concatenate(rows),
                     {"classes": n_classes, "violations": n_violations} if audit else None)


# -- grid --------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    predictors: tuple[PredictorId, ...] = SIMILARITY_PREDICTORS
    windows: tuple[int, ...] = (5, 10, 20, 30)
    sizes: tuple[float, ...] = (0.050, 0.025, 0.010)
    horizons: tuple[int, ...] = (1, 3, 5, 10)
    mauboussin: bool = True
    groups: bool = True
    min_class: int = 20

    @classmethod
    def from_toml(cls, path: str | Path) -> GridSpec:
        """Read a grid file; missing keys keep the defaults, ``predictors = "all"`` is allowed."""
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"{path}: unknown grid keys {sorted(unknown)}")
        kwargs = {}
        if "predictors" in data:
            preds = data["predictors"]
            kwargs["predictors"] = (SIMILARITY_PREDICTORS if preds == "all"
                                    else tuple(PredictorId.parse(p) for p in preds))
        for key in ("windows", "horizons"):
            if key in data:
                kwargs[key] = tuple(int(v) for v in data[key])
        if "sizes" in data:
            kwargs["sizes"] = tuple(float(v) for v in data["sizes"])
        for key in ("mauboussin", "groups"):
            if key in data:
                kwargs[key] = bool(data[key])
        if "min_class" in data:
            kwargs["min_class"] = int(data["min_class"])
        return cls(**kwargs)

    def combinations(self) -> list[ClassParams]:
        """All parameter combinations, per horizon: similarity, Mauboussin, then groups.

        Duplicates are dropped with a warning.
        """
        combos: list[ClassParams] = []
        for h in self.horizons:
            for pid in self.predictors:
                for w in self.windows:
                    for c in self.sizes:
                        combos.append(ClassParams(pid, h, w, c, "similarity", self.min_class))
            if self.mauboussin:
                combos += [ClassParams("sales", h, w, None, "mauboussin", self.min_class)
                           for w in self.windows]
            if self.groups:
                combos += [ClassParams(g, h, w, None, g.name, self.min_class)
                           for g in GROUP_PREDICTORS for w in self.windows]
        return dedupe(combos)


def dedupe(combos: Iterable[ClassParams]) -> list[ClassParams]:
    seen: set[ClassParams] = set()
    out = []
    for p in combos:
        if p in seen:
            warnings.warn(f"duplicate grid entry dropped: {p.describe()}", stacklevel=2)
            continue
        seen.add(p)
        out.append(p)
    return out


@dataclass
class GridResult:
    params: ClassParams
    m: int
    scores: GofScores
    skipped: dict[str, int]
    audit: dict[str, int] | None = None

    @classmethod
    def from_sample(cls, sample: PitSample) -> GridResult:
        return cls(sample.params, sample.m, GofScores.from_sample(sample), dict(sample.skipped),
                   sample.audit)


_SHARED: dict = {}


def _init_worker(panel, tables, exclude_self, audit):
    _SHARED.update(panel=panel, tables=tables, exclude_self=exclude_self, audit=audit)


def _grid_worker(params: ClassParams) -> GridResult:
    sample = run_backtest(_SHARED["panel"], _SHARED["tables"], params,
                          exclude_self=_SHARED["exclude_self"], audit=_SHARED["audit"])
    return GridResult.from_sample(sample)


def default_threads() -> int:
    env = os.environ.get("REFCAST_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_grid(panel: Panel, tables: PanelTables, grid: GridSpec | Sequence[ClassParams], *,
             threads: int | None = None, exclude_self: bool = False,
             audit: bool = False) -> list[GridResult]:
    """Backtest every combination; results keep the combination order for any thread count."""
    combos = grid.combinations() if isinstance(grid, GridSpec) else dedupe(grid)
    threads = default_threads() if threads is None else max(1, threads)
    for h in sorted({p.horizon for p in combos}):
        tables.outcomes.values(h)  # fill the cache before workers start
    if threads > 1 and len(combos) > 1:
        ctx = multiprocessing.get_context("fork") if "fork" in multiprocessing.get_all_start_methods() else None
        with ProcessPoolExecutor(max_workers=min(threads, len(combos)), mp_context=ctx,
                                 initializer=_init_worker,
                                 initargs=(panel, tables, exclude_self, audit)) as ex:
            return list(ex.map(_grid_worker, combos, chunksize=1))
    return [GridResult.from_sample(run_backtest(panel, tables, p, exclude_self=exclude_self,
                                                threads=threads, audit=audit))
            for p in combos]


# -- reporting -----------------------------------------------------------------

def add_ranks(frame: pd.DataFrame) -> pd.DataFrame:
    """Ordinal rank per measure within each horizon; smaller is better, NaN ranks last.

    Ties fall back to delta_q, ks, cvm, then the parameters.
    """
    frame = frame.copy()
    size_key = frame["size"].astype(float).fillna(-1.0)
    for measure in MEASURES:
        keys = [measure] + [m for m in MEASURES if m != measure]
        ranks = pd.Series(0, index=frame.index, dtype=np.int64)
        for _, grp in frame.assign(_size=size_key).groupby("horizon", sort=True):
            ordered = grp.sort_values(keys + ["method", "predictor", "window", "_size"],
                                      kind="mergesort", na_position="last")
            ranks.loc[ordered.index] = np.arange(1, len(ordered) + 1)
        frame[f"{measure}_rank"] = ranks
    return frame


def results_frame(results: Sequence[GridResult]) -> pd.DataFrame:
    rows = []
    for r in results:
        p, s = r.params, r.skipped
        rows.append({
            "predictor": p.predictor.name,
            "window": p.window,
            "size": p.size,
            "method": p.method,
            "horizon": p.horizon,
            "m": r.m,
            "delta_q": r.scores.delta_quantiles,
            "ks": r.scores.ks,
            "cvm": r.scores.cvm,
            "skipped_small": s.get("class_too_small", 0) + s.get("no_candidates", 0),
            "skipped_window": s.get("window", 0),
            "skipped_missing": s.get("no_outcome", 0) + s.get("predictor_missing", 0),
        })
    frame = pd.DataFrame(rows, columns=[c for c in RESULT_COLUMNS if not c.endswith("_rank")])
    frame = add_ranks(frame)
    for r, idx in zip(results, frame.index):
        r.scores.ranks = {m: int(frame.at[idx, f"{m}_rank"]) for m in MEASURES}
    return frame[RESULT_COLUMNS]


def write_results(frame: pd.DataFrame, path: str | Path, fmt: str = "csv") -> None:
    if fmt == "json":
        Path(path).write_text(frame.to_json(orient="records", indent=1, double_precision=15) + "\n")
    else:
        frame.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def read_results(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = set(RESULT_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: results lack columns {sorted(missing)}")
    return frame


def rank_results(results: pd.DataFrame | Sequence[GridResult], by: str = "delta_q") -> pd.DataFrame:
    """Order results by one measure within each horizon, with rank columns for all three.

    Adds ``mean_abs_q_dev_pp``, the average absolute quantile miss in
    percentage points (delta_q / 9 * 100).
    """
    if by not in MEASURES:
        raise ValueError(f"rank measure must be one of {MEASURES}")
    frame = results if isinstance(results, pd.DataFrame) else results_frame(results)
    if frame.empty:
        raise ValueError("no results to rank")
    frame = add_ranks(frame[[c for c in frame.columns if not c.endswith("_rank")]])
    frame["mean_abs_q_dev_pp"] = mean_quantile_deviation_pp(frame["delta_q"])
    frame = frame.sort_values(["horizon", f"{by}_rank"], kind="mergesort").reset_index(drop=True)
    return frame[RESULT_COLUMNS[:8] + ["mean_abs_q_dev_pp"] + RESULT_COLUMNS[8:]]


def format_ranking(frame: pd.DataFrame, top: int | None = None) -> str:
    """Plain-text table per horizon: predictor, window, size, then 'score (rank)' columns."""
    lines = []
    for h, grp in frame.groupby("horizon", sort=True):
        grp = grp.head(top) if top else grp
        lines.append(f"horizon {h}")
        lines.append(f"{'predictor':<34}{'window':>7}{'size':>7}{'delta_q (rank)':>18}"
                     f"{'mean pp':>9}{'KS (rank)':>16}{'CvM (rank)':>18}")
        for row in grp.itertuples(index=False):
            pid = PredictorId.parse(row.predictor)
            label = pid.label + (" (Mauboussin)" if row.method == "mauboussin" else "")
            size = "--" if pd.isna(row.size) else f"{row.size:g}"
            lines.append(f"{label:<34}{row.window:>7}{size:>7}"
                         f"{f'{row.delta_q:.4f} ({row.delta_q_rank})':>18}"
                         f"{row.mean_abs_q_dev_pp:>9.2f}"
                         f"{f'{row.ks:.4f} ({row.ks_rank})':>16}"
                         f"{f'{row.cvm:.4f} ({row.cvm_rank})':>18}")
        lines.append("")
    return "\n".join(lines)


def predictor_influence(panel: Panel, tables: PanelTables, params: ClassParams, year: int,
                        levels: Sequence[float] = tuple(np.round(np.arange(1, 10) / 10, 2)),
                        alpha: float = 0.025) -> pd.DataFrame:
    """Class median, trimmed mean and trimmed std for artificial cases at predictor quantiles.

    The artificial cases sit at the ``levels`` quantiles of the predictor
    among the candidates for ``year``.
    """
    if params.method != "similarity":
        raise ValueError("predictor influence needs a similarity combination")
    try:
        pool = collect_candidates(panel, tables, Case(None, year, math.nan), params)
    except SkipCase as skip:
        raise ValueError(f"no candidate pool for {year}: {skip}") from None
    values = quantiles(pool.x, levels)
    rows = []
    for level, v in zip(levels, values):
        try:
            cls = select_similarity_class(pool, Case(None, year, float(v)), params)
        except SkipCase as skip:
            raise ValueError(f"pool for {year} too small: {skip}") from None
        outcomes = cls.members.y
        rows.append({"level": level, "predictor_value": float(v), "n": cls.n,
                     "median": float(quantiles(np.sort(outcomes), [0.5])[0]),
                     "mean": trimmed_mean(outcomes, alpha), "std": trimmed_std(outcomes, alpha)})
    return pd.DataFrame(rows)


def with_min_class(combos: Iterable[ClassParams], min_class: int) -> list[ClassParams]:
    return [replace(p, min_class=min_class) for p in combos]
