"""Call-log ingestion: parsing, peak-hour filtering, demand-count matrices,
train/test splitting, and quantile trimming.

All transformations are pure; malformed or out-of-bounds rows are counted
and reported rather than silently discarded.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta
from pathlib import Path
from typing import Iterable, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .errors import ConfigError, DataError, OutOfBoundsError
from .geogrid import Grid, assign_cell
from .rng import substream

DEFAULT_COLUMNS = {
    "datetime": "datetime",
    "latitude": "latitude",
    "longitude": "longitude",
    "response_time_s": "response_time_s",
    "travel_time_s": "travel_time_s",
    "amb_latitude": "amb_latitude",
    "amb_longitude": "amb_longitude",
    "on_scene_s": "on_scene_s",
    "to_hospital_s": "to_hospital_s",
}
MANDATORY_FIELDS = ("datetime", "latitude", "longitude")


@dataclass(frozen=True)
class CallSchema:
    """Column-name mapping and timestamp interpretation for a call-log CSV."""

    columns: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_COLUMNS))
    timezone: str = "UTC"

    def zone(self) -> ZoneInfo:
        return ZoneInfo(self.timezone)


@dataclass(frozen=True)
class CallRecord:
    timestamp: datetime
    lat: float
    lon: float
    reported_response_s: float | None = None
    reported_travel_s: float | None = None
    ambulance_lat: float | None = None
    ambulance_lon: float | None = None
    on_scene_s: float | None = None
    to_hospital_s: float | None = None

    def epoch_s(self) -> float:
        return self.timestamp.timestamp()


@dataclass
class ParseReport:
    n_rows: int = 0
    n_parsed: int = 0
    n_dropped: int = 0
    reasons: Counter = field(default_factory=Counter)


def _parse_optional_seconds(raw: str | None, name: str) -> float | None:
    if raw is None or raw.strip() == "":
        return None
    v = float(raw)
    if not math.isfinite(v) or v < 0:
        raise ValueError(f"negative or non-finite {name}")
    return v


def _parse_optional_degrees(raw: str | None) -> float | None:
    if raw is None or raw.strip() == "":
        return None
    return float(raw)


def parse_calls(path: str | Path, schema: CallSchema | None = None) -> tuple[list[CallRecord], ParseReport]:
    """Parse a call-log CSV into records sorted by timestamp.

    Naive timestamps are interpreted in the schema's timezone (earlier
    offset on DST transitions). Malformed rows are dropped and counted in
    the report with a reason.
    """
    schema = schema or CallSchema()
    zone = schema.zone()
    cols = schema.columns
    report = ParseReport()
    records: list[CallRecord] = []
    try:
        f = open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"call log not found: {path}")
    with f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing = [cols[k] for k in MANDATORY_FIELDS if cols[k] not in header]
        if missing:
            raise DataError(f"{path}: missing mandatory columns: {', '.join(missing)}")
        for row in reader:
            report.n_rows += 1
            try:
                ts = datetime.fromisoformat(row[cols["datetime"]].strip())
            except (ValueError, AttributeError):
                report.n_dropped += 1
                report.reasons["bad_timestamp"] += 1
                continue
            if ts.tzinfo is None:
                ts = ts.replace(tzinfo=zone, fold=0)
            try:
                lat = float(row[cols["latitude"]])
                lon = float(row[cols["longitude"]])
                if not (math.isfinite(lat) and math.isfinite(lon)):
                    raise ValueError("non-finite coordinate")
            except (ValueError, TypeError):
                report.n_dropped += 1
                report.reasons["bad_coordinates"] += 1
                continue
            try:
                rec = CallRecord(
                    timestamp=ts,
                    lat=lat,
                    lon=lon,
                    reported_response_s=_parse_optional_seconds(row.get(cols["response_time_s"]), "response time"),
                    reported_travel_s=_parse_optional_seconds(row.get(cols["travel_time_s"]), "travel time"),
                    ambulance_lat=_parse_optional_degrees(row.get(cols["amb_latitude"])),
                    ambulance_lon=_parse_optional_degrees(row.get(cols["amb_longitude"])),
                    on_scene_s=_parse_optional_seconds(row.get(cols["on_scene_s"]), "on-scene time"),
                    to_hospital_s=_parse_optional_seconds(row.get(cols["to_hospital_s"]), "hospital time"),
                )
            except ValueError:
                report.n_dropped += 1
                report.reasons["bad_optional_field"] += 1
                continue
            records.append(rec)
            report.n_parsed += 1
    records.sort(key=lambda r: r.timestamp)
    return records, report


def serialize_calls(records: Iterable[CallRecord], path: str | Path) -> None:
    """Write records back out with the default column names (ISO timestamps)."""
    def fmt(v: float | None) -> str:
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(DEFAULT_COLUMNS.values()))
        for r in records:
            writer.writerow([
                r.timestamp.isoformat(),
                repr(float(r.lat)),
                repr(float(r.lon)),
                fmt(r.reported_response_s),
                fmt(r.reported_travel_s),
                fmt(r.ambulance_lat),
                fmt(r.ambulance_lon),
                fmt(r.on_scene_s),
                fmt(r.to_hospital_s),
            ])


def filter_peak(
    calls: Sequence[CallRecord],
    start: time = time(8, 0),
    end: time = time(20, 0),
    weekdays: Sequence[int] = (0, 1, 2, 3, 4),
) -> list[CallRecord]:
    """Keep calls whose local time lies in [start, end) on one of the weekdays.

    Monday is weekday 0. The default window is the high, consistent demand
    period of weekday daytime hours.
    """
    wd = set(weekdays)
    out = []
    for r in calls:
        t = r.timestamp
        if t.weekday() in wd and start <= t.time() < end:
            out.append(r)
    return out


@dataclass
class DemandMatrix:
    """Per-period, per-region call counts. Rows tile the data span contiguously."""

    counts: np.ndarray
    period_length_s: float
    period_start_times: list[datetime]
    n_dropped: int = 0

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2:
            raise DataError(f"counts must be 2-D, got shape {c.shape}")
        if np.any(c < 0):
            raise DataError("counts must be nonnegative")
        if len(self.period_start_times) != c.shape[0]:
            raise DataError("period_start_times length must match row count")
        self.counts = c

    @property
    def n_periods(self) -> int:
        return self.counts.shape[0]

    @property
    def n_regions(self) -> int:
        return self.counts.shape[1]


def build_demand_matrix(
    calls: Sequence[CallRecord],
    grid: Grid,
    period_length_s: float = 3600.0,
    snap_cells: float = 1.0,
) -> DemandMatrix:
    """Count calls per (period, region).

    Periods tile contiguously from the local midnight preceding the first
    call. Calls farther than snap_cells cell-widths outside the grid are
    dropped and counted in n_dropped.
    """
    if period_length_s <= 0:
        raise ConfigError(f"period_length_s must be positive, got {period_length_s}")
    if not calls:
        return DemandMatrix(np.zeros((0, grid.n_cells), dtype=np.int64), period_length_s, [])
    first = calls[0].timestamp
    anchor = first.replace(hour=0, minute=0, second=0, microsecond=0)
    anchor_s = anchor.timestamp()
    assigned: list[tuple[int, int]] = []
    n_dropped = 0
    last_p = 0
    for r in calls:
        try:
            cell = assign_cell(grid, r.lat, r.lon, snap_cells=snap_cells)
        except OutOfBoundsError:
            n_dropped += 1
            continue
        p = int(math.floor((r.epoch_s() - anchor_s) / period_length_s))
        if p < 0:
            raise DataError("calls must not precede the first call's midnight anchor")
        assigned.append((p, cell))
        last_p = max(last_p, p)
    counts = np.zeros((last_p + 1, grid.n_cells), dtype=np.int64)
    for p, cell in assigned:
        counts[p, cell] += 1
    starts = [anchor + timedelta(seconds=k * period_length_s) for k in range(last_p + 1)]
    return DemandMatrix(counts, period_length_s, starts, n_dropped=n_dropped)


def peak_period_mask(
    matrix: DemandMatrix,
    start: time = time(8, 0),
    end: time = time(20, 0),
    weekdays: Sequence[int] = (0, 1, 2, 3, 4),
) -> np.ndarray:
    """Boolean mask of periods whose start lies inside the peak window."""
    wd = set(weekdays)
    mask = np.zeros(matrix.n_periods, dtype=bool)
    for i, ts in enumerate(matrix.period_start_times):
        mask[i] = ts.weekday() in wd and start <= ts.time() < end
    return mask


def select_periods(matrix: DemandMatrix, mask: np.ndarray) -> DemandMatrix:
    keep = np.asarray(mask, dtype=bool)
    starts = [ts for ts, k in zip(matrix.period_start_times, keep) if k]
    return DemandMatrix(matrix.counts[keep], matrix.period_length_s, starts, matrix.n_dropped)


def save_demand_matrix(matrix: DemandMatrix, path: str | Path) -> None:
    """CSV export: one row per period, first column the ISO period start."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["period_start"] + [f"region_{j}" for j in range(matrix.n_regions)])
        for ts, row in zip(matrix.period_start_times, matrix.counts):
            writer.writerow([ts.isoformat()] + [int(v) for v in row])


def load_demand_matrix(path: str | Path, period_length_s: float = 3600.0) -> DemandMatrix:
    starts: list[datetime] = []
    rows: list[list[int]] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty demand matrix file")
        for line in reader:
            starts.append(datetime.fromisoformat(line[0]))
            rows.append([int(v) for v in line[1:]])
    if not rows:
        return DemandMatrix(np.zeros((0, 0), dtype=np.int64), period_length_s, [])
    return DemandMatrix(np.array(rows, dtype=np.int64), period_length_s, starts)


def split_train_test(
    calls: Sequence[CallRecord],
    fraction: float = 0.8,
    mode: str = "chronological",
    k: int = 5,
    fold_index: int = 0,
    seed: int = 0,
) -> tuple[list[CallRecord], list[CallRecord]]:
    """Disjoint, exhaustive train/test split.

    chronological: the earliest ``fraction`` of calls become the train set.
    kfold: a seeded shuffle partitions calls into k folds; fold_index is the
    test fold. Both modes keep each side in chronological order.
    """
    n = len(calls)
    if n < 2:
        raise DataError(f"need at least 2 calls to split, got {n}")
    if mode == "chronological":
        if not (0 < fraction < 1):
            raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
        n_train = min(max(int(math.floor(n * fraction)), 1), n - 1)
        return list(calls[:n_train]), list(calls[n_train:])
    if mode == "kfold":
        if k < 2 or not (0 <= fold_index < k):
            raise ConfigError(f"need k >= 2 and 0 <= fold_index < k, got k={k}, fold_index={fold_index}")
        perm = substream(seed, "folds").permutation(n)
        folds = np.array_split(perm, k)
        test_idx = set(int(i) for i in folds[fold_index])
        train = [c for i, c in enumerate(calls) if i not in test_idx]
        test = [c for i, c in enumerate(calls) if i in test_idx]
        return train, test
    raise ConfigError(f"unknown split mode: {mode!r}")


def trim_quantiles(pairs: Sequence[tuple[float, float]], p: float) -> list[tuple[float, float]]:
    """Drop pairs whose reported time falls in the bottom or top p tail.

    Cut points are the nearest-rank order statistics: with n pairs the
    lowest ceil(p*n) and highest ceil(p*n) reported values fall outside
    the retained range.
    """
    if not (0 <= p < 0.5):
        raise ConfigError(f"trim fraction must be in [0, 0.5), got {p}")
    pairs = list(pairs)
    n = len(pairs)
    if n == 0 or p == 0:
        return pairs
    k = math.ceil(p * n)
    reported = sorted(v for _, v in pairs)
    if k > n - 1 - k:
        return []
    lo, hi = reported[k], reported[n - 1 - k]
    return [pair for pair in pairs if lo <= pair[1] <= hi]


def calibration_pairs(
    calls: Sequence[CallRecord],
    grid: Grid,
    snap_cells: float = 1.0,
) -> tuple[list[tuple[float, float]], int]:
    """(grid travel s, reported travel s) pairs for calibration fitting.

    Calls missing a reported travel time or ambulance origin, or lying
    outside the snappable grid, are excluded; the count is returned.
    """
    out: list[tuple[float, float]] = []
    excluded = 0
    for r in calls:
        if r.reported_travel_s is None or r.ambulance_lat is None or r.ambulance_lon is None:
            excluded += 1
            continue
        try:
            a = assign_cell(grid, r.ambulance_lat, r.ambulance_lon, snap_cells=snap_cells)
            b = assign_cell(grid, r.lat, r.lon, snap_cells=snap_cells)
        except OutOfBoundsError:
            excluded += 1
            continue
        out.append((float(grid.travel_time_s[a, b]), float(r.reported_travel_s)))
    return out, excluded
