"""Firm-year panel: loading, validation, CPI deflation and indexing."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PANEL_COLUMNS = [
    "firm_id",
    "fiscal_year",
    "fye_month",
    "sales",
    "ebit",
    "total_assets",
    "shareholder_equity",
    "sic",
    "beta",
    "pe_ratio",
    "pb_ratio",
]
USD_COLUMNS = ["sales", "ebit", "total_assets", "shareholder_equity"]
REAL_COLUMNS = USD_COLUMNS + ["beta", "pe_ratio", "pb_ratio"]
REQUIRED_COLUMNS = ["firm_id", "fiscal_year", "sales"]

CACHE_MAGIC = "# refcast-panel"
CACHE_VERSION = 1


class PanelError(ValueError):
    """Raised for malformed or inconsistent panel / CPI input."""


@dataclass(frozen=True)
class IngestOptions:
    exclude_sic: bool = False
    sic_exclude_range: tuple[int, int] = (6000, 6799)
    start_year: int | None = None
    end_year: int | None = None


class CpiSeries:
    """Monthly CPI levels keyed by (year, month), base 1982-84 = 100."""

    def __init__(self, values: dict[tuple[int, int], float]):
        if not values:
            raise PanelError("CPI series is empty")
        keys = sorted(values)
        for key in keys:
            if not values[key] > 0:
                raise PanelError(f"CPI value for {key[0]}-{key[1]:02d} is not positive")
        first, last = keys[0], keys[-1]
        expected = (last[0] - first[0]) * 12 + (last[1] - first[1]) + 1
        if expected != len(keys):
            y, m = first
            while (y, m) <= last:
                if (y, m) not in values:
                    raise PanelError(f"CPI series has a gap at {y}-{m:02d}")
                y, m = (y + 1, 1) if m == 12 else (y, m + 1)
        self.values = dict(values)

    @classmethod
    def from_csv(cls, path: str | Path) -> CpiSeries:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
        missing = {"year", "month", "cpi"} - set(df.columns)
        if missing:
            raise PanelError(f"{path}: CPI header lacks {sorted(missing)}")
        values = {}
        for i, row in enumerate(df.itertuples(index=False), start=2):
            try:
                year, month, cpi = int(row.year), int(row.month), float(row.cpi)
            except ValueError:
                raise PanelError(f"{path}: malformed CPI row {i}") from None
            if not 1 <= month <= 12:
                raise PanelError(f"{path}: row {i}: month {month} outside 1..12")
            if (year, month) in values:
                raise PanelError(f"{path}: row {i}: duplicate CPI month {year}-{month:02d}")
            values[(year, month)] = cpi
        return cls(values)

    def deflator(self, years: np.ndarray, months: np.ndarray) -> np.ndarray:
        """CPI/100 for every (year, month) pair; raises on any uncovered month."""
        out = np.empty(len(years))
        for idx, (y, m) in enumerate(zip(years.tolist(), months.tolist())):
            try:
                out[idx] = self.values[(y, m)] / 100.0
            except KeyError:
                raise PanelError(f"CPI missing for fiscal-year-end month {y}-{m:02d}") from None
        return out


class Panel:
    """Immutable firm-year panel.

    ``frame`` holds one row per (firm_id, fiscal_year), sorted by firm then
    year, with NaN marking missing reals and <NA> a missing SIC. ``firm_code``
    numbers the firms in firm_id order so array code can tie-break by firm.
    """

    def __init__(self, frame: pd.DataFrame, start_year: int, end_year: int,
                 dropped: dict[str, int] | None = None):
        frame = frame.sort_values(["firm_id", "fiscal_year"], kind="stable").reset_index(drop=True)
        self.frame = frame
        self.start_year = int(start_year)
        self.end_year = int(end_year)
        self.dropped = dict(dropped or {})
        firms = frame["firm_id"].to_numpy()
        self.firm_ids, self.firm_code = np.unique(firms, return_inverse=True)
        self.years = frame["fiscal_year"].to_numpy(dtype=np.int64)

    def __len__(self) -> int:
        return len(self.frame)

    def __repr__(self) -> str:
        return (f"Panel({len(self)} records, {len(self.firm_ids)} firms, "
                f"{self.start_year}-{self.end_year})")

    @cached_property
    def by_firm(self) -> dict[str, np.ndarray]:
        return {fid: grp["fiscal_year"].to_numpy() for fid, grp in self.frame.groupby("firm_id", sort=True)}

    @cached_property
    def by_year(self) -> dict[int, np.ndarray]:
        """Year -> row positions into ``frame``."""
        order = np.argsort(self.years, kind="stable")
        years = self.years[order]
        bounds = np.flatnonzero(np.diff(years)) + 1
        return {int(chunk_years[0]): rows for chunk_years, rows in
                zip(np.split(years, bounds), np.split(order, bounds))}

    @cached_property
    def _row_lookup(self) -> pd.Series:
        idx = pd.MultiIndex.from_arrays([self.frame["firm_id"], self.frame["fiscal_year"]])
        return pd.Series(np.arange(len(self.frame)), index=idx)

    def row(self, firm_id: str, year: int) -> int | None:
        """Row position of (firm_id, year), or None if absent."""
        try:
            return int(self._row_lookup.loc[(firm_id, int(year))])
        except KeyError:
            return None

    def lagged(self, column: str, lag: int) -> np.ndarray:
        """``column`` at (firm, year - lag) aligned to every row; NaN where absent.

        A negative lag looks forward.
        """
        values = self.frame[column].to_numpy(dtype=float)
        target = pd.MultiIndex.from_arrays([self.frame["firm_id"], self.years - lag])
        pos = self._row_lookup.reindex(target).to_numpy()
        out = np.full(len(values), np.nan)
        hit = ~np.isnan(pos)
        out[hit] = values[pos[hit].astype(np.int64)]
        return out

    # -- serialization -----------------------------------------------------

    def to_cache(self, path: str | Path) -> None:
        header = {"version": CACHE_VERSION, "start_year": self.start_year,
                  "end_year": self.end_year, "dropped": dict(sorted(self.dropped.items()))}
        buf = io.StringIO()
        buf.write(f"{CACHE_MAGIC} {json.dumps(header, sort_keys=True)}\n")
        self.frame[PANEL_COLUMNS].to_csv(buf, index=False, float_format="%.17g", lineterminator="\n")
        Path(path).write_text(buf.getvalue(), encoding="utf-8")

    def to_csv(self, path: str | Path) -> None:
        """Write the standard panel CSV (no cache header)."""
        self.frame[PANEL_COLUMNS].to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _parse_panel_frame(raw: pd.DataFrame, source: str) -> pd.DataFrame:
    missing = [c for c in REQUIRED_COLUMNS if c not in raw.columns]
    if missing:
        raise PanelError(f"{source}: header lacks required columns {missing}")
    for col in PANEL_COLUMNS:
        if col not in raw.columns:
            raw[col] = ""
    raw = raw[PANEL_COLUMNS].apply(lambda s: s.str.strip())
    rownum = np.arange(len(raw)) + 2  # header is line 1

    def bad(mask: np.ndarray, what: str) -> None:
        if mask.any():
            first = int(np.flatnonzero(mask)[0])
            raise PanelError(f"{source}: row {rownum[first]}: {what} "
                             f"(value {raw.iloc[first].to_dict()!r})")

    out = pd.DataFrame({"firm_id": raw["firm_id"].astype(str)})
    bad((out["firm_id"] == "").to_numpy(), "empty firm_id")

    def integer(col: str, required: bool) -> pd.Series:
        text = raw[col]
        num = pd.to_numeric(text.where(text != ""), errors="coerce")
        invalid = (text != "") & (num.isna() | (num % 1 != 0))
        bad(invalid.to_numpy(), f"{col} is not an integer")
        if required:
            bad((text == "").to_numpy(), f"{col} is missing")
        return num.astype("Int64")

    out["fiscal_year"] = integer("fiscal_year", True).astype(np.int64)
    months = integer("fye_month", False).fillna(12)
    bad(((months < 1) | (months > 12)).to_numpy(dtype=bool), "fye_month outside 1..12")
    out["fye_month"] = months.astype(np.int64)
    for col in REAL_COLUMNS:
        text = raw[col]
        num = pd.to_numeric(text.where(text != ""), errors="coerce").astype(float)
        bad(((text != "") & ~np.isfinite(num)).to_numpy(), f"{col} is not a finite number")
        out[col] = num
    bad((out["sales"] < 0).to_numpy(), "negative sales")
    sic = integer("sic", False)
    bad(((sic < 0) | (sic > 9999)).fillna(False).to_numpy(dtype=bool), "sic is not a 4-digit code")
    out["sic"] = sic
    return out


def _finalize(frame: pd.DataFrame, options: IngestOptions, source: str,
              cpi: CpiSeries | None) -> Panel:
    dup = frame.duplicated(["firm_id", "fiscal_year"], keep=False)
    if dup.any():
        first = frame[dup].iloc[0]
        raise PanelError(f"{source}: duplicate record for firm {first.firm_id!r}, "
                         f"fiscal year {first.fiscal_year}")
    dropped: dict[str, int] = {}

    def drop(mask: pd.Series, reason: str) -> pd.DataFrame:
        dropped[reason] = int(mask.sum())
        return frame[~mask]

    if options.exclude_sic:
        lo, hi = options.sic_exclude_range
        frame = drop(frame["sic"].between(lo, hi).fillna(False).astype(bool), "excluded_sic")
    if options.start_year is not None:
        frame = drop(frame["fiscal_year"] < options.start_year, "before_start")
    if options.end_year is not None:
        frame = drop(frame["fiscal_year"] > options.end_year, "after_end")
    frame = drop(frame["sales"].isna(), "missing_sales")
    counts = frame.groupby("firm_id")["fiscal_year"].transform("size")
    singletons = counts < 2
    dropped["single_record_firms"] = int(frame.loc[singletons, "firm_id"].nunique())
    frame = drop(singletons, "single_record_rows")
    if frame.empty:
        raise PanelError(f"{source}: no records left after filtering")

    if cpi is not None:
        factor = cpi.deflator(frame["fiscal_year"].to_numpy(), frame["fye_month"].to_numpy())
        frame = frame.copy()
        for col in USD_COLUMNS:
            frame[col] = frame[col].to_numpy() / factor

    start = options.start_year if options.start_year is not None else int(frame["fiscal_year"].min())
    end = options.end_year if options.end_year is not None else int(frame["fiscal_year"].max())
    for reason, n in dropped.items():
        if n:
            logger.info("%s: dropped %d (%s)", source, n, reason)
    return Panel(frame, start, end, dropped)


def load_panel(panel_csv: str | Path, cpi_csv: str | Path | None = None,
               config: IngestOptions | None = None) -> Panel:
    """Read a raw panel CSV, validate it, filter it and deflate USD fields.

    Rows without sales and firms left with a single record are dropped; the
    drop counts end up in ``Panel.dropped``. With ``cpi_csv`` every USD
    column is divided by CPI(fiscal-year-end month)/100.
    """
    config = config or IngestOptions()
    source = str(panel_csv)
    raw = pd.read_csv(panel_csv, dtype=str, keep_default_na=False, encoding="utf-8")
    frame = _parse_panel_frame(raw, source)
    cpi = CpiSeries.from_csv(cpi_csv) if cpi_csv is not None else None
    return _finalize(frame, config, source, cpi)


def read_cache(path: str | Path) -> Panel:
    text = Path(path).read_text(encoding="utf-8")
    first, _, body = text.partition("\n")
    if not first.startswith(CACHE_MAGIC):
        raise PanelError(f"{path}: not a panel cache")
    header = json.loads(first[len(CACHE_MAGIC):])
    if header.get("version") != CACHE_VERSION:
        raise PanelError(f"{path}: unsupported cache version {header.get('version')}")
    raw = pd.read_csv(io.StringIO(body), dtype=str, keep_default_na=False)
    frame = _parse_panel_frame(raw, str(path))
    return Panel(frame, header["start_year"], header["end_year"], header["dropped"])


def open_panel(path: str | Path, cpi_csv: str | Path | None = None,
               config: IngestOptions | None = None) -> Panel:
    """Open either a cache written by ``Panel.to_cache`` or a raw panel CSV."""
    with open(path, encoding="utf-8") as fh:
        head = fh.readline()
    if head.startswith(CACHE_MAGIC):
        return read_cache(path)
    return load_panel(path, cpi_csv, config)


def survivorship_rate(panel: Panel, h: int) -> float:
    """Share of records (i, t) with t + h <= end_year whose firm is still present at t + h."""
    if h < 1:
        raise ValueError("horizon must be >= 1")
    eligible = panel.years + h <= panel.end_year
    if not eligible.any():
        raise ValueError(f"no records with t + {h} <= {panel.end_year}")
    target = pd.MultiIndex.from_arrays([panel.frame["firm_id"], panel.years + h])
    ahead = target.isin(panel._row_lookup.index)
    return float((ahead & eligible).sum() / eligible.sum())
