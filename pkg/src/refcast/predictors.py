"""Predictor variables and forward sales-growth outcomes per (firm, year)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .forecast import quantiles
from .panel import Panel

MAX_LAG = 10

_SCALAR_KINDS = {
    "total_assets": ("total assets", "in million USD"),
    "operating_margin": ("operating margin", "EBIT divided by sales (in %)"),
    "sales": ("sales", "in million USD"),
    "shareholder_equity": ("shareholder equity", "total assets minus total liabilities (in million USD)"),
    "major_group": ("major group", "first two digits of SIC"),
    "industry_group": ("industry group", "first three digits of SIC"),
    "beta": ("beta", "slope of regressing daily return on market return"),
    "pb_ratio": ("price-to-book ratio", "market cap. divided by shareholder equity"),
    "pe_ratio": ("price-to-earnings ratio", "market cap. divided by net income"),
}
_LAGGED_KINDS = ("sales_cagr", "op_margin_delta")
GROUP_KINDS = ("major_group", "industry_group")


@dataclass(frozen=True, order=True)
class PredictorId:
    kind: str
    k: int | None = None

    def __post_init__(self):
        if self.kind in _LAGGED_KINDS:
            if self.k is None or not 1 <= self.k <= MAX_LAG:
                raise ValueError(f"{self.kind} needs a lag k in 1..{MAX_LAG}, got {self.k}")
        elif self.kind in _SCALAR_KINDS:
            if self.k is not None:
                raise ValueError(f"{self.kind} takes no lag")
        else:
            raise ValueError(f"unknown predictor kind {self.kind!r}")

    @classmethod
    def parse(cls, name: str) -> PredictorId:
        """Inverse of ``name``: 'sales', 'sales_cagr_3', 'op_margin_delta_6', ..."""
        for kind in _LAGGED_KINDS:
            if name.startswith(kind + "_"):
                suffix = name[len(kind) + 1:]
                if suffix.isdigit():
                    return cls(kind, int(suffix))
        return cls(name)

    @property
    def name(self) -> str:
        return self.kind if self.k is None else f"{self.kind}_{self.k}"

    @property
    def is_group(self) -> bool:
        return self.kind in GROUP_KINDS

    @property
    def label(self) -> str:
        if self.kind == "sales_cagr":
            return f"past {self.k}-year sales CAGR"
        if self.kind == "op_margin_delta":
            return f"{self.k}-year op. mar. delta"
        return _SCALAR_KINDS[self.kind][0]

    @property
    def description(self) -> str:
        if self.kind == "sales_cagr":
            years = "past year" if self.k == 1 else f"past {self.k} years"
            return f"compound sales growth rate in {years} (in %)"
        if self.kind == "op_margin_delta":
            return f"change of op. mar. since {self.k} year(s) ago (in pp per year)"
        return _SCALAR_KINDS[self.kind][1]

    def __str__(self) -> str:
        return self.name


# 7 level and market predictors, 10 CAGRs, 10 deltas; the summary slots the SIC groups after the levels.
_LEVELS = ["total_assets", "operating_margin", "sales", "shareholder_equity"]
_MARKET = ["beta", "pb_ratio", "pe_ratio"]
SIMILARITY_PREDICTORS: tuple[PredictorId, ...] = tuple(
    [PredictorId(k) for k in _LEVELS + _MARKET]
    + [PredictorId("sales_cagr", k) for k in range(1, MAX_LAG + 1)]
    + [PredictorId("op_margin_delta", k) for k in range(1, MAX_LAG + 1)]
)
GROUP_PREDICTORS = (PredictorId("major_group"), PredictorId("industry_group"))
SUMMARY_ORDER: tuple[PredictorId, ...] = tuple(
    [PredictorId(k) for k in _LEVELS] + list(GROUP_PREDICTORS) + [PredictorId(k) for k in _MARKET]
    + list(SIMILARITY_PREDICTORS[7:])
)
assert len(SIMILARITY_PREDICTORS) == 27


# -- scalar definitions ------------------------------------------------------

def _missing(x) -> bool:
    return x is None or (isinstance(x, float) and math.isnan(x))


def operating_margin(ebit: float | None, sales: float | None) -> float | None:
    """EBIT / sales in percent; None when either is missing or sales is 0."""
    if _missing(ebit) or _missing(sales) or sales == 0:
        return None
    return 100.0 * ebit / sales


def cagr(start: float | None, end: float | None, years: int) -> float | None:
    """Compound annual growth in percent from ``start`` to ``end``.

    Needs start > 0; an end value of 0 gives -100.
    """
    if _missing(start) or _missing(end) or start <= 0:
        return None
    return 100.0 * ((end / start) ** (1.0 / years) - 1.0)


def _sales(panel: Panel, firm: str, year: int) -> float | None:
    row = panel.row(firm, year)
    return None if row is None else float(panel.frame["sales"].iat[row])


def _margin(panel: Panel, firm: str, year: int) -> float | None:
    row = panel.row(firm, year)
    if row is None:
        return None
    return operating_margin(float(panel.frame["ebit"].iat[row]), float(panel.frame["sales"].iat[row]))


def past_sales_cagr(panel: Panel, firm: str, t: int, k: int) -> float | None:
    return cagr(_sales(panel, firm, t - k), _sales(panel, firm, t), k)


def forward_sales_cagr(panel: Panel, firm: str, t: int, h: int) -> float | None:
    return cagr(_sales(panel, firm, t), _sales(panel, firm, t + h), h)


def op_margin_delta(panel: Panel, firm: str, t: int, k: int) -> float | None:
    """Change of the operating margin over k years, in pp per year."""
    now, before = _margin(panel, firm, t), _margin(panel, firm, t - k)
    if now is None or before is None:
        return None
    return (now - before) / k


# -- vectorized tables ---------------------------------------------------------

def _cagr_array(start: np.ndarray, end: np.ndarray, years: int) -> np.ndarray:
    out = np.full(len(start), np.nan)
    ok = (start > 0) & ~np.isnan(end)
    out[ok] = 100.0 * ((end[ok] / start[ok]) ** (1.0 / years) - 1.0)
    return out


def _margin_array(ebit: np.ndarray, sales: np.ndarray) -> np.ndarray:
    out = np.full(len(sales), np.nan)
    ok = ~np.isnan(ebit) & ~np.isnan(sales) & (sales != 0)
    out[ok] = 100.0 * ebit[ok] / sales[ok]
    return out


class PredictorTable:
    """Predictor values aligned to ``panel.frame`` rows.

    Numeric predictors are float columns with NaN for missing; the SIC groups
    are nullable integer codes.
    """

    def __init__(self, panel: Panel, frame: pd.DataFrame):
        self.panel = panel
        self.frame = frame

    def values(self, predictor: PredictorId | str) -> np.ndarray:
        pid = PredictorId.parse(predictor) if isinstance(predictor, str) else predictor
        col = self.frame[pid.name]
        if pid.is_group:
            return col.astype("Float64").to_numpy(dtype=float, na_value=np.nan)
        return col.to_numpy(dtype=float)

    def get(self, firm: str, year: int, predictor: PredictorId | str):
        row = self.panel.row(firm, year)
        if row is None:
            return None
        value = self.values(predictor)[row]
        return None if np.isnan(value) else value


def build_predictor_table(panel: Panel) -> PredictorTable:
    f = panel.frame
    sales = f["sales"].to_numpy(dtype=float)
    ebit = f["ebit"].to_numpy(dtype=float)
    margin = _margin_array(ebit, sales)
    cols: dict[str, object] = {
        "total_assets": f["total_assets"].to_numpy(dtype=float),
        "operating_margin": margin,
        "sales": sales,
        "shareholder_equity": f["shareholder_equity"].to_numpy(dtype=float),
        "beta": f["beta"].to_numpy(dtype=float),
        "pb_ratio": f["pb_ratio"].to_numpy(dtype=float),
        "pe_ratio": f["pe_ratio"].to_numpy(dtype=float),
        "major_group": (f["sic"] // 100).astype("Int64").to_numpy(),
        "industry_group": (f["sic"] // 10).astype("Int64").to_numpy(),
    }
    for k in range(1, MAX_LAG + 1):
        cols[f"sales_cagr_{k}"] = _cagr_array(panel.lagged("sales", k), sales, k)
    for k in range(1, MAX_LAG + 1):
        past = _margin_array(panel.lagged("ebit", k), panel.lagged("sales", k))
        cols[f"op_margin_delta_{k}"] = (margin - past) / k
    frame = pd.DataFrame(cols)
    frame["major_group"] = frame["major_group"].astype("Int64")
    frame["industry_group"] = frame["industry_group"].astype("Int64")
    return PredictorTable(panel, frame)


class OutcomeTable:
    """Forward h-year sales CAGR (%) aligned to panel rows, NaN where undefined."""

    def __init__(self, panel: Panel):
        self.panel = panel
        self._cache: dict[int, np.ndarray] = {}

    def values(self, h: int) -> np.ndarray:
        if h not in self._cache:
            sales = self.panel.frame["sales"].to_numpy(dtype=float)
            self._cache[h] = _cagr_array(sales, self.panel.lagged("sales", -h), h)
        return self._cache[h]

    def get(self, firm: str, year: int, h: int) -> float | None:
        row = self.panel.row(firm, year)
        if row is None:
            return None
        value = self.values(h)[row]
        return None if np.isnan(value) else value


@dataclass
class PanelTables:
    """Panel plus the derived predictor and outcome tables."""

    panel: Panel
    predictors: PredictorTable
    outcomes: OutcomeTable


def build_tables(panel: Panel) -> PanelTables:
    return PanelTables(panel, build_predictor_table(panel), OutcomeTable(panel))


SUMMARY_LEVELS = (0.025, 0.25, 0.5, 0.75, 0.975)
SUMMARY_COLUMNS = ["predictor", "description", "q_0.025", "q_0.25", "median", "mean",
                   "q_0.75", "q_0.975", "missings"]


def summarize_predictors(table: PredictorTable) -> pd.DataFrame:
    """One row per predictor: quantiles, mean and missing count.

    For the SIC groups the statistics describe group sizes (records per
    group), the missing count is the number of records without SIC.
    """
    rows = []
    n = len(table.frame)
    for pid in SUMMARY_ORDER:
        values = table.values(pid)
        present = values[~np.isnan(values)]
        missings = n - len(present)
        if pid.is_group and len(present):
            _, sizes = np.unique(present, return_counts=True)
            present = sizes.astype(float)
        if len(present):
            qs = quantiles(np.sort(present), SUMMARY_LEVELS)
            stats = [qs[0], qs[1], qs[2], float(present.mean()), qs[3], qs[4]]
        else:
            stats = [np.nan] * 6
        rows.append([pid.name, pid.description, *stats, missings])
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
