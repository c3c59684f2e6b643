"""Two-stage stochastic stationing: minimize mean shortfall over sampled
demand scenarios.

The exact search is a best-first branch and bound over integer stationing
vectors summing to at most the fleet bound. Partial assignments are bounded
by letting the unplaced ambulances serve any region, which only relaxes the
station-capacity constraint and is therefore admissible. The frontier is
ordered by (bound, prefix), so the first complete assignment popped is an
exact optimum and, among ties, the lexicographically smallest.

The same search serves the robust master problem with a different
aggregator (pool max instead of scenario mean); any external MILP backend
can be plugged in through the ``backend`` hook.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dispatchflow import Deployment, EdgeSet, ScenarioEvaluator, ShortfallResult, min_shortfall
from .errors import ConfigError, DataError, SolverError
from .ingest import DemandMatrix
from .rng import substream

Aggregator = Callable[[np.ndarray], float]


def mean_aggregator(totals: np.ndarray) -> float:
    return float(totals.mean())


def max_aggregator(totals: np.ndarray) -> float:
    return float(totals.max())


@dataclass
class ScenarioSet:
    """Equally weighted demand scenarios resampled from historical periods."""

    demands: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        d = np.asarray(self.demands, dtype=np.int64)
        if d.ndim != 2 or d.shape[0] < 1:
            raise DataError("scenario set needs at least one scenario row")
        if np.any(d < 0):
            raise DataError("scenario demands must be nonnegative")
        self.demands = d

    @property
    def m(self) -> int:
        return self.demands.shape[0]

    @property
    def scenarios(self) -> list[np.ndarray]:
        return list(self.demands)


def sample_scenarios(matrix: DemandMatrix | np.ndarray, m: int, seed: int = 0) -> ScenarioSet:
    """Draw m period rows uniformly with replacement (the empirical distribution)."""
    counts = matrix.counts if isinstance(matrix, DemandMatrix) else np.asarray(matrix)
    if m < 1:
        raise ConfigError(f"need at least one scenario, got m={m}")
    if counts.ndim != 2 or counts.shape[0] == 0:
        raise DataError("cannot sample scenarios from an empty demand matrix")
    idx = substream(seed, "scenarios").integers(0, counts.shape[0], size=m)
    return ScenarioSet(counts[idx], seed=seed)


@dataclass
class SearchConfig:
    max_nodes: int = 1_000_000


@dataclass
class OptimalityFlag:
    kind: str  # "exact" or "bound_gap"
    gap: float = 0.0


@dataclass
class SearchResult:
    x: np.ndarray
    objective: float
    flag: OptimalityFlag
    nodes: int


def minimize_deployment(
    demands: np.ndarray,
    n: int,
    edges: EdgeSet,
    aggregator: Aggregator = mean_aggregator,
    config: SearchConfig | None = None,
) -> SearchResult:
    """Exact min over stationings (sum <= n) of an aggregated shortfall.

    ``aggregator`` maps the per-scenario shortfall totals to the objective
    and must be entrywise nondecreasing for the bound to stay admissible.
    """
    config = config or SearchConfig()
    if n < 0:
        raise ConfigError(f"fleet bound must be nonnegative, got {n}")
    n_i = edges.n_stations
    if n_i < 1:
        raise DataError("need at least one station")
    ev = ScenarioEvaluator(edges, np.asarray(demands, dtype=np.int64))

    def bound_of(prefix: tuple[int, ...]) -> float:
        free = n - sum(prefix)
        if len(prefix) == n_i:
            return aggregator(ev.totals(np.array(prefix, dtype=np.int64)))
        padded = np.zeros(n_i, dtype=np.int64)
        padded[: len(prefix)] = prefix
        return aggregator(ev.relaxed_totals(padded, free))

    heap: list[tuple[float, tuple[int, ...]]] = [(bound_of(()), ())]
    nodes = 0
    while heap:
        bound, prefix = heapq.heappop(heap)
        nodes += 1
        if len(prefix) == n_i:
            return SearchResult(
                x=np.array(prefix, dtype=np.int64),
                objective=bound,
                flag=OptimalityFlag("exact"),
                nodes=nodes,
            )
        if nodes >= config.max_nodes:
            # keep the most promising node as an incumbent, never fail silently
            incumbent = np.zeros(n_i, dtype=np.int64)
            incumbent[: len(prefix)] = prefix
            obj = aggregator(ev.totals(incumbent))
            lowest = min(bound, min((b for b, _ in heap), default=bound))
            return SearchResult(
                x=incumbent,
                objective=obj,
                flag=OptimalityFlag("bound_gap", gap=max(obj - lowest, 0.0)),
                nodes=nodes,
            )
        free = n - sum(prefix)
        for v in range(free + 1):
            child = prefix + (v,)
            heapq.heappush(heap, (bound_of(child), child))
    raise SolverError("search frontier exhausted without a complete stationing")


@dataclass
class StochasticSolution:
    x_star: Deployment
    objective: float
    per_scenario: list[ShortfallResult]
    optimality_flag: OptimalityFlag
    m: int = 0
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "x": [int(v) for v in self.x_star.x],
            "objective": self.objective,
            "n": self.x_star.n,
            "M": self.m,
            "seed": self.seed,
            "optimality_flag": (
                "exact"
                if self.optimality_flag.kind == "exact"
                else {"bound_gap": self.optimality_flag.gap}
            ),
        }


SearchBackend = Callable[[np.ndarray, int, EdgeSet, Aggregator, "SearchConfig | None"], SearchResult]


def solve_stochastic(
    scenarios: ScenarioSet,
    n: int,
    edges: EdgeSet,
    config: SearchConfig | None = None,
    backend: SearchBackend = minimize_deployment,
) -> StochasticSolution:
    """Minimize the empirical mean shortfall over the scenario set.

    ``backend`` is the problem-in, stationing-out seam; the default is the
    built-in exact search, but an external integer-programming solver with
    the same signature can be substituted.
    """
    result = backend(scenarios.demands, n, edges, mean_aggregator, config)
    per_scenario = [min_shortfall(result.x, d, edges) for d in scenarios.demands]
    objective = float(np.mean([r.total for r in per_scenario]))
    return StochasticSolution(
        x_star=Deployment(result.x, n),
        objective=objective,
        per_scenario=per_scenario,
        optimality_flag=result.flag,
        m=scenarios.m,
        seed=scenarios.seed,
    )


def evaluate_deployment(x, scenarios: ScenarioSet | np.ndarray, edges: EdgeSet) -> float:
    """Mean minimum shortfall of a stationing over a scenario set."""
    demands = scenarios.demands if isinstance(scenarios, ScenarioSet) else np.asarray(scenarios)
    ev = ScenarioEvaluator(edges, demands)
    return float(ev.totals(np.asarray(x, dtype=np.int64)).mean())


def save_solution(solution: StochasticSolution, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(solution.to_dict(), f, sort_keys=True, indent=1)
        f.write("\n")
