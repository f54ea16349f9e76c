"""Distributional outputs computed from a reference class's outcome sample."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

GROWTH_FLOOR = -100.0

# Right-closed bins: (-inf,-25], (-25,-20], ..., (40,45], (45,inf)
BIN_EDGES = np.arange(-25.0, 46.0, 5.0)
BIN_LABELS = (
    ["<= -25"]
    + [f"]{int(lo)},{int(hi)}]" for lo, hi in zip(BIN_EDGES[:-1], BIN_EDGES[1:])]
    + ["> 45"]
)


@dataclass(frozen=True)
class EmpiricalDistribution:
    outcomes: np.ndarray

    def __post_init__(self):
        if len(self.outcomes) == 0:
            raise ValueError("empirical distribution needs at least one outcome")

    @classmethod
    def from_values(cls, values: Iterable[float]) -> EmpiricalDistribution:
        if not isinstance(values, np.ndarray):
            values = list(values)
        arr = np.sort(np.asarray(values, dtype=float))
        if np.isnan(arr).any():
            raise ValueError("outcomes contain NaN")
        return cls(arr)

    @property
    def n(self) -> int:
        return len(self.outcomes)


def pit_evaluate(dist: EmpiricalDistribution, realized: float) -> float:
    """Share of class outcomes <= ``realized`` (the empirical CDF at the realization)."""
    return int(np.searchsorted(dist.outcomes, realized, side="right")) / dist.n


def quantiles(sorted_values: np.ndarray, levels: Sequence[float] | np.ndarray) -> np.ndarray:
    """Linearly interpolated order-statistic quantiles of an ascending array.

    Position ``level * (n - 1)`` on the 0-based order statistics.
    """
    levels = np.asarray(levels, dtype=float)
    if np.any((levels < 0) | (levels > 1)) or np.isnan(levels).any():
        raise ValueError("quantile levels must lie in [0, 1]")
    n = len(sorted_values)
    if n == 0:
        raise ValueError("quantile of an empty sample")
    pos = levels * (n - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    return sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo])


def quantile(dist: EmpiricalDistribution, level: float) -> float:
    return float(quantiles(dist.outcomes, [level])[0])


def _trimmed(values, alpha: float, need: int) -> np.ndarray:
    if not 0 <= alpha < 0.5:
        raise ValueError("trim fraction must be in [0, 0.5)")
    arr = np.sort(np.asarray(values, dtype=float))
    cut = math.floor(alpha * len(arr))
    kept = arr[cut:len(arr) - cut]
    if len(kept) < need:
        raise ValueError(f"{len(kept)} values left after trimming, need {need}")
    return kept


def trimmed_mean(values, alpha: float = 0.025) -> float:
    """Mean after dropping floor(alpha * n) values from each end."""
    return float(np.mean(_trimmed(values, alpha, 1)))


def trimmed_std(values, alpha: float = 0.025) -> float:
    """Sample standard deviation (ddof=1) of the trimmed vector."""
    return float(np.std(_trimmed(values, alpha, 2), ddof=1))


@dataclass(frozen=True)
class BaseRateTable:
    shares: pd.Series  # percent per bin, indexed by BIN_LABELS
    mean: float
    median: float
    std: float
    q025: float
    q975: float
    alpha: float
    n: int

    def as_series(self) -> pd.Series:
        stats = pd.Series({"mean": self.mean, "median": self.median, "std": self.std,
                           "q_0.025": self.q025, "q_0.975": self.q975, "n": float(self.n)})
        return pd.concat([self.shares, stats])


def bin_index(values: np.ndarray) -> np.ndarray:
    return np.searchsorted(BIN_EDGES, values, side="left")


def base_rate_table(dist: EmpiricalDistribution, alpha: float = 0.025) -> BaseRateTable:
    counts = np.bincount(bin_index(dist.outcomes), minlength=len(BIN_LABELS))
    shares = pd.Series(100.0 * counts / dist.n, index=BIN_LABELS)
    mean = trimmed_mean(dist.outcomes, alpha)
    std = trimmed_std(dist.outcomes, alpha) if dist.n - 2 * math.floor(alpha * dist.n) >= 2 else float("nan")
    q025, med, q975 = quantiles(dist.outcomes, [0.025, 0.5, 0.975])
    return BaseRateTable(shares, mean, float(med), std, float(q025), float(q975), alpha, dist.n)


def base_rate_frame(tables: dict[str, BaseRateTable]) -> pd.DataFrame:
    """Side-by-side base-rate columns (e.g. '1-Yr', '1-Yr MC') with bins then stats as rows."""
    frame = pd.DataFrame({label: t.as_series() for label, t in tables.items()})
    frame.index.name = "cagr_pct"
    return frame


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(sd, IQR/1.34) * n^(-1/5); falls back to sd when the IQR is 0."""
    arr = np.sort(np.asarray(values, dtype=float))
    n = len(arr)
    if n < 2:
        raise ValueError("bandwidth needs at least two values")
    sd = float(np.std(arr, ddof=1))
    q1, q3 = quantiles(arr, [0.25, 0.75])
    spread = min(sd, (q3 - q1) / 1.34) if q3 > q1 else sd
    bw = 0.9 * spread * n ** -0.2
    if not bw > 0:
        raise ValueError("zero bandwidth: sample is constant")
    return bw


def kde_density(dist: EmpiricalDistribution, grid, reflect: bool = True,
                bandwidth: float | None = None) -> np.ndarray:
    """Gaussian kernel density on [-100, inf).

    With ``reflect`` each kernel is mirrored at -100 so the density keeps unit
    mass on the support; grid points below -100 get density 0.
    """
    grid = np.asarray(grid, dtype=float)
    x = dist.outcomes
    bw = silverman_bandwidth(x) if bandwidth is None else bandwidth
    norm = 1.0 / (dist.n * bw * math.sqrt(2 * math.pi))
    out = np.empty(len(grid))
    # chunk the grid so the (grid x sample) block stays small
    step = max(1, 2_000_000 // max(dist.n, 1))
    for i in range(0, len(grid), step):
        g = grid[i:i + step, None]
        dens = np.exp(-0.5 * ((g - x) / bw) ** 2).sum(axis=1)
        if reflect:
            dens += np.exp(-0.5 * ((g - (2 * GROWTH_FLOOR - x)) / bw) ** 2).sum(axis=1)
        out[i:i + step] = dens * norm
    if reflect:
        out[grid < GROWTH_FLOOR] = 0.0
    return out


def default_grid(dist: EmpiricalDistribution, points: int = 512) -> np.ndarray:
    """Evaluation grid from -100 up to the sample max plus four bandwidths."""
    try:
        pad = 4 * silverman_bandwidth(dist.outcomes)
    except ValueError:
        pad = 1.0
    hi = max(dist.outcomes[-1] + pad, GROWTH_FLOOR + 1.0)
    return np.linspace(GROWTH_FLOOR, hi, points)


def place_estimates(dist: EmpiricalDistribution, estimates: Iterable[float]) -> list[tuple[float, float]]:
    """Map analyst estimates (growth in %) onto the class's empirical CDF."""
    return [(float(e), pit_evaluate(dist, e)) for e in estimates]
