"""Second-stage recourse: route stationed ambulances to realized demand.

Shortfall for a stationing x and demand d is the unmet demand after an
optimal integral routing over the feasible edges, i.e. total demand minus
the max flow of the bipartite network (source -> station i at capacity
x_i, uncapacitated station-region edges, region j -> sink at capacity
d_j). Routings come from an augmenting-path max flow; the solvers use a
vectorized min-cut enumeration over station subsets, which equals the max
flow value because the middle edges are uncapacitated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

# Min-cut enumeration over 2^|I| station subsets; beyond this the value
# path falls back to the flow algorithm.
_MAX_CUT_STATIONS = 14


class EdgeSet:
    """Canonical feasible station-region edges with cached cut structure."""

    def __init__(self, edges: Iterable[tuple[int, int]], n_stations: int, n_regions: int):
        canon = sorted((int(i), int(j)) for i, j in edges)
        if len(set(canon)) != len(canon):
            raise DataError("duplicate edge in edge set")
        for i, j in canon:
            if not (0 <= i < n_stations and 0 <= j < n_regions):
                raise DataError(f"edge ({i}, {j}) outside {n_stations} stations x {n_regions} regions")
        self.edges: tuple[tuple[int, int], ...] = tuple(canon)
        self.n_stations = int(n_stations)
        self.n_regions = int(n_regions)
        self.station_regions: list[list[int]] = [[] for _ in range(n_stations)]
        self.region_stations: list[list[int]] = [[] for _ in range(n_regions)]
        for i, j in self.edges:
            self.station_regions[i].append(j)
            self.region_stations[j].append(i)
        self._edge_index = {e: k for k, e in enumerate(self.edges)}
        self._subset_region_mask: np.ndarray | None = None
        self._subset_station_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.edges)

    def __contains__(self, edge: tuple[int, int]) -> bool:
        return tuple(edge) in self._edge_index

    def incidence(self) -> tuple[np.ndarray, np.ndarray]:
        """(B_I, B_J): per-station and per-region incidence over edge columns."""
        b_i = np.zeros((self.n_stations, len(self.edges)), dtype=np.int64)
        b_j = np.zeros((self.n_regions, len(self.edges)), dtype=np.int64)
        for k, (i, j) in enumerate(self.edges):
            b_i[i, k] = 1
            b_j[j, k] = 1
        return b_i, b_j

    def _cut_masks(self) -> tuple[np.ndarray, np.ndarray]:
        if self._subset_region_mask is None:
            n = self.n_stations
            station_mask = np.zeros((1 << n, n), dtype=np.float64)
            region_mask = np.zeros((1 << n, self.n_regions), dtype=np.float64)
            row_region = [np.zeros(self.n_regions) for _ in range(n)]
            for i in range(n):
                row_region[i][self.station_regions[i]] = 1.0
            for s in range(1, 1 << n):
                low = s & -s
                i = low.bit_length() - 1
                prev = s ^ low
                station_mask[s] = station_mask[prev]
                station_mask[s, i] = 1.0
                region_mask[s] = np.maximum(region_mask[prev], row_region[i])
            self._subset_station_mask = station_mask
            self._subset_region_mask = region_mask
        return self._subset_station_mask, self._subset_region_mask


def edges_from_coverage(coverage: np.ndarray) -> EdgeSet:
    """Feasible edges = the true entries of a stations x regions coverage matrix."""
    cov = np.asarray(coverage, dtype=bool)
    pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(cov))]
    return EdgeSet(pairs, cov.shape[0], cov.shape[1])


def incidence(edges: Iterable[tuple[int, int]], n_stations: int, n_regions: int) -> tuple[np.ndarray, np.ndarray]:
    """Incidence matrices for an edge list; duplicate edges are rejected."""
    es = edges if isinstance(edges, EdgeSet) else EdgeSet(edges, n_stations, n_regions)
    return es.incidence()


@dataclass
class Deployment:
    """Integer stationing vector with its fleet bound."""

    x: np.ndarray
    n: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        if np.any(self.x < 0):
            raise DataError("stationing must be nonnegative")
        if int(self.x.sum()) > self.n:
            raise DataError(f"stationing places {int(self.x.sum())} ambulances, fleet bound is {self.n}")


@dataclass
class Routing:
    """Integral flow per feasible edge."""

    edges: EdgeSet
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.shape != (len(self.edges),):
            raise DataError("routing vector length must match edge count")
        if np.any(self.y < 0):
            raise DataError("routing must be nonnegative")

    def station_usage(self) -> np.ndarray:
        b_i, _ = self.edges.incidence()
        return b_i @ self.y

    def region_served(self) -> np.ndarray:
        _, b_j = self.edges.incidence()
        return b_j @ self.y


@dataclass
class ShortfallResult:
    """Unmet demand per region for one (stationing, demand) pair."""

    z: np.ndarray
    total: int
    routing: Routing


class _Dinic:
    def __init__(self, n: int):
        self.n = n
        self.to: list[int] = []
        self.cap: list[int] = []
        self.head: list[list[int]] = [[] for _ in range(n)]

    def add_edge(self, u: int, v: int, cap: int) -> int:
        idx = len(self.to)
        self.to.append(v)
        self.cap.append(cap)
        self.head[u].append(idx)
        self.to.append(u)
        self.cap.append(0)
        self.head[v].append(idx + 1)
        return idx

    def max_flow(self, s: int, t: int) -> int:
        flow = 0
        while True:
            level = [-1] * self.n
            level[s] = 0
            queue = [s]
            for u in queue:
                for e in self.head[u]:
                    v = self.to[e]
                    if self.cap[e] > 0 and level[v] < 0:
                        level[v] = level[u] + 1
                        queue.append(v)
            if level[t] < 0:
                return flow
            it = [0] * self.n

            def dfs(u: int, pushed: int) -> int:
                if u == t:
                    return pushed
                while it[u] < len(self.head[u]):
                    e = self.head[u][it[u]]
                    v = self.to[e]
                    if self.cap[e] > 0 and level[v] == level[u] + 1:
                        got = dfs(v, min(pushed, self.cap[e]))
                        if got > 0:
                            self.cap[e] -= got
                            self.cap[e ^ 1] += got
                            return got
                    it[u] += 1
                return 0

            while True:
                pushed = dfs(s, 1 << 60)
                if pushed == 0:
                    break
                flow += pushed


def _as_edges(edges, n_stations: int, n_regions: int) -> EdgeSet:
    if isinstance(edges, EdgeSet):
        if edges.n_stations != n_stations or edges.n_regions != n_regions:
            raise DataError(
                f"edge set is {edges.n_stations}x{edges.n_regions}, "
                f"instance is {n_stations}x{n_regions}"
            )
        return edges
    return EdgeSet(edges, n_stations, n_regions)


def min_shortfall(x, d, edges) -> ShortfallResult:
    """Minimum total shortfall with an optimal integral routing attached."""
    x = np.asarray(x, dtype=np.int64)
    d = np.asarray(d, dtype=np.int64)
    es = _as_edges(edges, len(x), len(d))
    if np.any(x < 0) or np.any(d < 0):
        raise DataError("stationing and demand must be nonnegative")
    n_i, n_j = es.n_stations, es.n_regions
    source, sink = n_i + n_j, n_i + n_j + 1
    net = _Dinic(n_i + n_j + 2)
    big = int(d.sum()) + 1
    for i in range(n_i):
        if x[i] > 0:
            net.add_edge(source, i, int(x[i]))
    mid = {}
    for k, (i, j) in enumerate(es.edges):
        mid[k] = net.add_edge(i, n_i + j, big)
    for j in range(n_j):
        if d[j] > 0:
            net.add_edge(n_i + j, sink, int(d[j]))
    net.max_flow(source, sink)
    y = np.zeros(len(es.edges), dtype=np.int64)
    for k, e in mid.items():
        y[k] = net.cap[e ^ 1]
    routing = Routing(es, y)
    z = d - routing.region_served()
    return ShortfallResult(z=z, total=int(z.sum()), routing=routing)


def shortfall_total(x, d, edges) -> int:
    """Minimum total shortfall, value only."""
    d = np.asarray(d, dtype=np.int64)
    return int(scenario_totals(x, d.reshape(1, -1), edges)[0])


def scenario_totals(x, demands, edges) -> np.ndarray:
    """Minimum shortfall totals of one stationing against many demand rows."""
    demands = np.asarray(demands, dtype=np.int64)
    x = np.asarray(x, dtype=np.int64)
    es = _as_edges(edges, len(x), demands.shape[1])
    return ScenarioEvaluator(es, demands).totals(x)


class ScenarioEvaluator:
    """Batched shortfall totals for a fixed edge set and demand matrix.

    Caches the per-subset cut structure so solvers can score many candidate
    stationings cheaply.
    """

    def __init__(self, edges: EdgeSet, demands: np.ndarray):
        self.edges = edges
        self.demands = np.asarray(demands, dtype=np.int64)
        if self.demands.ndim != 2 or self.demands.shape[1] != edges.n_regions:
            raise DataError("demand matrix must be scenarios x regions")
        self._fast = edges.n_stations <= _MAX_CUT_STATIONS
        if self._fast:
            _, region_mask = edges._cut_masks()
            # cost of the region side of each cut, per subset x scenario
            self._region_cost = region_mask @ self.demands.T.astype(np.float64)
        self._demand_sums = self.demands.sum(axis=1)

    def totals(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        if x.shape != (self.edges.n_stations,):
            raise DataError("stationing length must match station count")
        if self._fast:
            station_mask, _ = self.edges._cut_masks()
            inside = station_mask @ x.astype(np.float64)
            cut = (float(x.sum()) - inside)[:, None] + self._region_cost
            maxflow = cut.min(axis=0)
            return np.rint(self._demand_sums - maxflow).astype(np.int64)
        return np.array(
            [min_shortfall(x, d, self.edges).total for d in self.demands],
            dtype=np.int64,
        )

    def relaxed_totals(self, x, free_units: int) -> np.ndarray:
        """Totals when ``free_units`` extra ambulances may serve any region.

        This only relaxes the station-capacity constraint, so it lower
        bounds the totals of any completion that stations those units.
        """
        base = self.totals(x)
        return np.maximum(base - int(free_units), 0)


def save_routing_csv(routing: Routing, path) -> None:
    """Debug dump of a flow as an edge list: station, region, units."""
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["station", "region", "units"])
        for (i, j), units in zip(routing.edges.edges, routing.y):
            writer.writerow([i, j, int(units)])


def nearest_available(
    x_available: Sequence[int],
    region_j: int,
    travel_s: np.ndarray,
    edges: EdgeSet | None = None,
    restrict_to_edges: bool = False,
) -> int | None:
    """Index of the closest station with a free unit, or None if all busy.

    travel_s is the stations x regions travel matrix. Ties go to the lowest
    station index. With restrict_to_edges, stations lacking a feasible edge
    to the region are skipped.
    """
    best = None
    best_t = None
    for i, avail in enumerate(x_available):
        if avail < 1:
            continue
        if restrict_to_edges and edges is not None and (i, region_j) not in edges:
            continue
        t = float(travel_s[i][region_j])
        if best_t is None or t < best_t:
            best, best_t = i, t
    return best
