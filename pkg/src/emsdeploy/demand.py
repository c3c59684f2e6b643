"""Poisson demand rates and the Value-at-Risk uncertainty set.

Rates are fitted per region at four aggregation levels: the region itself
(single), its queen-adjacent neighborhood (local), the cells within the
coverage-time ball (regional), and the whole city (global). The robust
uncertainty set caps integer demand vectors by the (1 - alpha) Poisson
quantile of each aggregate.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, SetTooLargeError, SolverError
from .ingest import DemandMatrix


@dataclass
class PoissonRates:
    """Expected calls per period at each aggregation level."""

    single: np.ndarray
    local: np.ndarray
    regional: np.ndarray
    global_rate: float

    def __post_init__(self):
        self.single = np.asarray(self.single, dtype=np.float64)
        self.local = np.asarray(self.local, dtype=np.float64)
        self.regional = np.asarray(self.regional, dtype=np.float64)
        for name, arr in (("single", self.single), ("local", self.local), ("regional", self.regional)):
            if np.any(arr < 0):
                raise DataError(f"{name} rates must be nonnegative")
        if self.global_rate < 0:
            raise DataError("global rate must be nonnegative")


def fit_rates(
    demand: DemandMatrix | np.ndarray,
    adjacency: np.ndarray,
    coverage_ball: np.ndarray,
) -> PoissonRates:
    """Poisson MLE rates from a period-by-region count matrix.

    adjacency and coverage_ball are boolean region-by-region membership
    matrices; row j gives the cells aggregated into region j's local and
    regional series.
    """
    counts = demand.counts if isinstance(demand, DemandMatrix) else np.asarray(demand)
    if counts.ndim != 2 or counts.shape[0] == 0:
        raise DataError("need at least one period of demand counts")
    adjacency = np.asarray(adjacency, dtype=bool)
    coverage_ball = np.asarray(coverage_ball, dtype=bool)
    n_regions = counts.shape[1]
    if adjacency.shape != (n_regions, n_regions) or coverage_ball.shape != (n_regions, n_regions):
        raise DataError("membership matrices must be regions x regions")
    single = counts.mean(axis=0)
    local = (counts @ adjacency.T.astype(np.int64)).mean(axis=0)
    regional = (counts @ coverage_ball.T.astype(np.int64)).mean(axis=0)
    global_rate = float(counts.sum(axis=1).mean())
    return PoissonRates(single, local, regional, global_rate)


def poisson_var(rate: float, alpha: float) -> int:
    """Smallest integer k with P(Poisson(rate) <= k) >= 1 - alpha.

    Uses forward pmf summation via the multiplicative recurrence, which is
    stable for the moderate rates this package deals in.
    """
    if not (0 < alpha < 1):
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    if rate < 0:
        raise ConfigError(f"rate must be nonnegative, got {rate}")
    if rate == 0:
        return 0
    if rate > 700:
        raise ConfigError(f"rate {rate} exceeds the stable summation range")
    target = 1.0 - alpha
    pmf = math.exp(-rate)
    cdf = pmf
    k = 0
    while cdf < target:
        k += 1
        pmf *= rate / k
        cdf += pmf
        if pmf == 0.0 and cdf < target:
            raise SolverError(f"alpha={alpha} is below float64 resolution at rate={rate}")
    return k


@dataclass
class UncertaintySet:
    """Integer demand vectors capped by Poisson Value-at-Risk at four levels.

    Membership: d is in the set iff every d_j is within its single cap,
    every adjacent-neighborhood sum is within its local cap, every
    coverage-ball sum is within its regional cap, and the total is within
    the global cap.
    """

    alpha: float
    single_cap: np.ndarray
    local_cap: np.ndarray
    regional_cap: np.ndarray
    global_cap: int
    adjacency: np.ndarray
    coverage_ball: np.ndarray

    def __post_init__(self):
        self.single_cap = np.asarray(self.single_cap, dtype=np.int64)
        self.local_cap = np.asarray(self.local_cap, dtype=np.int64)
        self.regional_cap = np.asarray(self.regional_cap, dtype=np.int64)
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        self.coverage_ball = np.asarray(self.coverage_ball, dtype=bool)
        for name, arr in (("single", self.single_cap), ("local", self.local_cap), ("regional", self.regional_cap)):
            if np.any(arr < 0):
                raise DataError(f"{name} caps must be nonnegative")
        if self.global_cap < 0:
            raise DataError("global cap must be nonnegative")

    @property
    def n_regions(self) -> int:
        return len(self.single_cap)

    def contains(self, d) -> bool:
        d = np.asarray(d, dtype=np.int64)
        if d.shape != (self.n_regions,) or np.any(d < 0):
            return False
        if np.any(d > self.single_cap):
            return False
        if np.any(self.adjacency.astype(np.int64) @ d > self.local_cap):
            return False
        if np.any(self.coverage_ball.astype(np.int64) @ d > self.regional_cap):
            return False
        return int(d.sum()) <= self.global_cap


def build_uncertainty_set(
    rates: PoissonRates,
    alpha: float,
    adjacency: np.ndarray,
    coverage_ball: np.ndarray,
) -> UncertaintySet:
    """Cap each fitted rate at its (1 - alpha) Poisson quantile."""
    return UncertaintySet(
        alpha=alpha,
        single_cap=np.array([poisson_var(r, alpha) for r in rates.single], dtype=np.int64),
        local_cap=np.array([poisson_var(r, alpha) for r in rates.local], dtype=np.int64),
        regional_cap=np.array([poisson_var(r, alpha) for r in rates.regional], dtype=np.int64),
        global_cap=poisson_var(rates.global_rate, alpha),
        adjacency=adjacency,
        coverage_ball=coverage_ball,
    )


def enumerate_set(uset: UncertaintySet, size_budget: int = 200_000) -> np.ndarray:
    """All member demand vectors, one per row, in lexicographic order.

    Raises SetTooLargeError when the bounding box alone exceeds the budget;
    callers fall back to heuristic search in that case.
    """
    caps = uset.single_cap
    box = 1
    for c in caps:
        box *= int(c) + 1
        if box > size_budget:
            raise SetTooLargeError(
                f"uncertainty-set box has more than {size_budget} points; "
                "raise size_budget or use the heuristic path"
            )
    grid = np.array(list(itertools.product(*(range(int(c) + 1) for c in caps))), dtype=np.int64)
    adj = uset.adjacency.astype(np.int64)
    ball = uset.coverage_ball.astype(np.int64)
    keep = (
        np.all(grid @ adj.T <= uset.local_cap, axis=1)
        & np.all(grid @ ball.T <= uset.regional_cap, axis=1)
        & (grid.sum(axis=1) <= uset.global_cap)
    )
    return grid[keep]


def save_uncertainty_set(uset: UncertaintySet, path: str | Path) -> None:
    doc = {
        "alpha": uset.alpha,
        "single_cap": [int(v) for v in uset.single_cap],
        "local_cap": [int(v) for v in uset.local_cap],
        "regional_cap": [int(v) for v in uset.regional_cap],
        "global_cap": int(uset.global_cap),
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def load_uncertainty_set(path: str | Path, adjacency: np.ndarray, coverage_ball: np.ndarray) -> UncertaintySet:
    """Rebuild a set from exported caps plus the grid's membership matrices."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise DataError(f"uncertainty set not found: {path}")
    return UncertaintySet(
        alpha=float(doc["alpha"]),
        single_cap=np.array(doc["single_cap"], dtype=np.int64),
        local_cap=np.array(doc["local_cap"], dtype=np.int64),
        regional_cap=np.array(doc["regional_cap"], dtype=np.int64),
        global_cap=int(doc["global_cap"]),
        adjacency=adjacency,
        coverage_ball=coverage_ball,
    )
