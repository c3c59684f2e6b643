"""Command-line pipeline: grid, preprocess, fit, optimize, simulate,
verify, alpha-cv, fleet-sweep, analyze, plotdata.

Every subcommand reads a flat JSON config (any field overridable with
``--key value``), writes its outputs plus a resolved-config copy under
``--out``, and finishes with a manifest listing file hashes. Reruns with
the same resolved config are byte-identical. Exit codes: 0 ok, 2 config
error, 3 data error, 4 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import time
from pathlib import Path

import numpy as np

from . import analysis, calibrate, demand, geogrid, ingest, robust, simcore, stochastic
from .dispatchflow import EdgeSet, edges_from_coverage
from .errors import ConfigError, DataError, EmsDeployError, SolverError
from .rng import derive_seed

log = logging.getLogger("emsdeploy")


@dataclass
class RunConfig:
    """Flat, fully-defaulted run configuration; the reproducibility unit."""

    # input paths
    calls_csv: str | None = None
    svi_csv: str | None = None
    tract_map_csv: str | None = None
    travel_matrix_csv: str | None = None
    # grid geometry
    n_rows: int = 6
    n_cols: int = 6
    min_lat: float = 30.10
    max_lat: float = 30.40
    min_lon: float = -97.90
    max_lon: float = -97.60
    station_cells: list[int] = field(default_factory=lambda: [7, 10, 25, 28])
    hospital_cells: list[int] = field(default_factory=lambda: [14])
    travel_provider: str = "synthetic"  # synthetic | matrix
    # at 60 km/h the default stations cover the whole default grid within
    # the 600 s threshold, keeping the robust model non-degenerate
    speed_kmh: float = 60.0
    coverage_threshold_s: float = 600.0
    # ingestion
    timezone: str = "UTC"
    peak_filter: bool = True
    peak_start: str = "08:00"
    peak_end: str = "20:00"
    peak_weekdays: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    period_length_s: float = 3600.0
    rate_periods: str = "peak"  # peak | all
    snap_cells: float = 1.0
    train_fraction: float = 0.8
    split_mode: str = "chronological"  # chronological | kfold
    split_k: int = 5
    split_fold: int = 0
    # optimization
    n_ambulances: int = 6
    m_scenarios: int = 100
    alpha: float = 0.01
    epsilon: float = 1e-6
    ccg_max_iter: int = 200
    max_nodes: int = 1_000_000
    set_size_budget: int = 200_000
    # simulation
    n_calls: int = 1000
    n_batches: int = 12
    lognormal_mu: float = 3.65
    lognormal_sigma: float = 0.3
    shortfall_threshold_s: float = 600.0
    sample_with_replacement: bool = False
    restrict_dispatch_to_coverage: bool = False
    # calibration / verification
    calibration_kind: str = "loglog"  # identity | linear | loglog
    trim_p: float = 0.01
    verify_batch_size: int = 1000
    verify_n_batches: int = 20
    # alpha cross-validation
    alphas: list[float] = field(default_factory=lambda: [0.1, 0.05, 0.01, 0.001, 0.0001])
    cv_folds: int = 3
    # fleet sweep
    n_min: int = 4
    n_max: int = 8
    sweep_robust: bool = True
    # analysis
    analysis_folds: int = 5
    lambda_grid: list[float] = field(default_factory=lambda: [0.001, 0.01, 0.1, 1.0, 10.0])
    # root seed
    seed: int = 0

    def validate(self) -> None:
        if self.n_rows < 1 or self.n_cols < 1:
            raise ConfigError("n_rows and n_cols must be at least 1")
        if not (self.min_lat < self.max_lat and self.min_lon < self.max_lon):
            raise ConfigError("grid bounds are degenerate")
        if self.travel_provider not in ("synthetic", "matrix"):
            raise ConfigError(f"unknown travel_provider {self.travel_provider!r}")
        if self.travel_provider == "matrix" and not self.travel_matrix_csv:
            raise ConfigError("travel_provider=matrix requires travel_matrix_csv")
        if self.speed_kmh <= 0:
            raise ConfigError("speed_kmh must be positive")
        if not (0 < self.alpha < 1):
            raise ConfigError("alpha must lie in (0, 1)")
        if not all(0 < a < 1 for a in self.alphas):
            raise ConfigError("every alpha-cv value must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not (0 < self.train_fraction < 1):
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.rate_periods not in ("peak", "all"):
            raise ConfigError(f"unknown rate_periods {self.rate_periods!r}")
        if self.calibration_kind not in ("identity", "linear", "loglog"):
            raise ConfigError(f"unknown calibration_kind {self.calibration_kind!r}")
        if self.split_mode not in ("chronological", "kfold"):
            raise ConfigError(f"unknown split_mode {self.split_mode!r}")
        if self.n_ambulances < 0 or self.m_scenarios < 1:
            raise ConfigError("need n_ambulances >= 0 and m_scenarios >= 1")
        if self.n_min < 1 or self.n_min > self.n_max:
            raise ConfigError("need 1 <= n_min <= n_max for the fleet sweep")
        n = self.n_rows * self.n_cols
        for name, cells in (("station_cells", self.station_cells), ("hospital_cells", self.hospital_cells)):
            if any(not (0 <= c < n) for c in cells):
                raise ConfigError(f"{name} contains an index outside 0..{n - 1}")
        try:
            self._parse_time(self.peak_start)
            self._parse_time(self.peak_end)
        except ValueError as exc:
            raise ConfigError(f"bad peak window time: {exc}")

    @staticmethod
    def _parse_time(text: str) -> time:
        hh, mm = text.split(":")
        return time(int(hh), int(mm))

    def peak_window(self) -> tuple[time, time]:
        return self._parse_time(self.peak_start), self._parse_time(self.peak_end)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value, current):
    if isinstance(value, str):
        text = value
        if isinstance(current, bool):
            low = text.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ConfigError(f"cannot parse boolean for {name}: {text!r}")
        if isinstance(current, int) and not isinstance(current, bool):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, list):
            return json.loads(text)
        return text
    return value


def load_config(path: str | None, overrides: dict[str, object]) -> RunConfig:
    cfg = RunConfig()
    doc: dict = {}
    if path:
        try:
            with open(path) as f:
                doc = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}")
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
    merged = {**doc, **overrides}
    for key, value in merged.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config field: {key}")
        try:
            setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
        except (ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})")
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path.name}; run `emsdeploy {produced_by}` first")
    return path


def _build_grid(cfg: RunConfig) -> geogrid.Grid:
    bounds = (cfg.min_lat, cfg.max_lat, cfg.min_lon, cfg.max_lon)
    if cfg.travel_provider == "matrix":
        provider = geogrid.MatrixProvider(geogrid.load_travel_matrix(cfg.travel_matrix_csv))
    else:
        provider = geogrid.SyntheticSpeedProvider(cfg.speed_kmh)
    return geogrid.build_grid(
        bounds, cfg.n_rows, cfg.n_cols, provider,
        station_cells=cfg.station_cells, hospital_cells=cfg.hospital_cells,
    )


def _load_grid(cfg: RunConfig, out: Path) -> geogrid.Grid:
    return geogrid.load_grid(_require(out / "grid.json", "grid"))


def _edges(cfg: RunConfig, grid: geogrid.Grid) -> EdgeSet:
    return edges_from_coverage(geogrid.derive_coverage(grid, cfg.coverage_threshold_s))


def _sim_params(cfg: RunConfig, model: calibrate.CalibrationModel | None) -> simcore.SimParams:
    return simcore.SimParams(
        lognormal_mu=cfg.lognormal_mu,
        lognormal_sigma=cfg.lognormal_sigma,
        shortfall_threshold_s=cfg.shortfall_threshold_s,
        calibration=model,
        restrict_dispatch_to_coverage=cfg.restrict_dispatch_to_coverage,
        coverage_threshold_s=cfg.coverage_threshold_s,
        snap_cells=cfg.snap_cells,
    )


def _parse_calls(cfg: RunConfig) -> tuple[list[ingest.CallRecord], ingest.ParseReport]:
    if not cfg.calls_csv:
        raise ConfigError("calls_csv is required for this subcommand")
    schema = ingest.CallSchema(timezone=cfg.timezone)
    return ingest.parse_calls(cfg.calls_csv, schema)


def _peak(cfg: RunConfig, calls):
    if not cfg.peak_filter:
        return list(calls)
    start, end = cfg.peak_window()
    return ingest.filter_peak(calls, start, end, cfg.peak_weekdays)


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def _demand_for_rates(cfg: RunConfig, calls, grid) -> ingest.DemandMatrix:
    matrix = ingest.build_demand_matrix(calls, grid, cfg.period_length_s, cfg.snap_cells)
    if cfg.rate_periods == "peak":
        start, end = cfg.peak_window()
        mask = ingest.peak_period_mask(matrix, start, end, cfg.peak_weekdays)
        matrix = ingest.select_periods(matrix, mask)
    return matrix


def _fit_uncertainty(cfg: RunConfig, matrix: ingest.DemandMatrix, grid) -> tuple[demand.PoissonRates, demand.UncertaintySet]:
    adjacency = geogrid.derive_adjacency(grid)
    ball = geogrid.derive_region_ball(grid, cfg.coverage_threshold_s)
    rates = demand.fit_rates(matrix, adjacency, ball)
    uset = demand.build_uncertainty_set(rates, cfg.alpha, adjacency, ball)
    return rates, uset


# ---------------------------------------------------------------------------
# subcommands: each returns {filename: Path} of what it wrote


def cmd_grid(cfg: RunConfig, out: Path) -> dict[str, Path]:
    grid = _build_grid(cfg)
    path = out / "grid.json"
    geogrid.save_grid(grid, path)
    return {"grid.json": path, "grid_travel.csv": out / "grid_travel.csv"}


def cmd_preprocess(cfg: RunConfig, out: Path) -> dict[str, Path]:
    grid = _load_grid(cfg, out)
    calls, report = _parse_calls(cfg)
    peak_calls = _peak(cfg, calls)
    if len(peak_calls) < 2:
        raise DataError(f"only {len(peak_calls)} calls remain after peak filtering")
    train, test = ingest.split_train_test(
        peak_calls, cfg.train_fraction, cfg.split_mode, cfg.split_k, cfg.split_fold, cfg.seed
    )
    matrix = _demand_for_rates(cfg, train, grid)
    files = {}
    ingest.serialize_calls(train, out / "calls_train.csv")
    ingest.serialize_calls(test, out / "calls_test.csv")
    ingest.save_demand_matrix(matrix, out / "demand_matrix.csv")
    summary = {
        "n_rows_read": report.n_rows,
        "n_parsed": report.n_parsed,
        "n_dropped_parse": report.n_dropped,
        "drop_reasons": dict(sorted(report.reasons.items())),
        "n_peak": len(peak_calls),
        "n_train": len(train),
        "n_test": len(test),
        "n_demand_periods": matrix.n_periods,
        "n_dropped_out_of_grid": matrix.n_dropped,
    }
    _write_json(out / "preprocess_summary.json", summary)
    for name in ("calls_train.csv", "calls_test.csv", "demand_matrix.csv", "preprocess_summary.json"):
        files[name] = out / name
    return files


def cmd_fit(cfg: RunConfig, out: Path) -> dict[str, Path]:
    grid = _load_grid(cfg, out)
    matrix = ingest.load_demand_matrix(_require(out / "demand_matrix.csv", "preprocess"), cfg.period_length_s)
    rates, uset = _fit_uncertainty(cfg, matrix, grid)
    _write_json(out / "rates.json", {
        "single": [float(v) for v in rates.single],
        "local": [float(v) for v in rates.local],
        "regional": [float(v) for v in rates.regional],
        "global": rates.global_rate,
    })
    demand.save_uncertainty_set(uset, out / "uncertainty.json")
    if cfg.calibration_kind == "identity":
        model = calibrate.identity_model()
    else:
        train_calls, _ = ingest.parse_calls(_require(out / "calls_train.csv", "preprocess"))
        pairs, n_excluded = ingest.calibration_pairs(train_calls, grid, cfg.snap_cells)
        if cfg.calibration_kind == "loglog":
            model = calibrate.fit_loglog(pairs, cfg.trim_p)
        else:
            model = calibrate.fit_linear(pairs, cfg.trim_p)
        log.info("calibration fitted on %d pairs (%d excluded)", model.n_used, n_excluded)
    calibrate.save_model(model, out / "calibration.json")
    return {name: out / name for name in ("rates.json", "uncertainty.json", "calibration.json")}


def cmd_optimize(cfg: RunConfig, out: Path) -> dict[str, Path]:
    grid = _load_grid(cfg, out)
    matrix = ingest.load_demand_matrix(_require(out / "demand_matrix.csv", "preprocess"), cfg.period_length_s)
    edges = _edges(cfg, grid)
    adjacency = geogrid.derive_adjacency(grid)
    ball = geogrid.derive_region_ball(grid, cfg.coverage_threshold_s)
    uset = demand.load_uncertainty_set(_require(out / "uncertainty.json", "fit"), adjacency, ball)
    scenarios = stochastic.sample_scenarios(matrix, cfg.m_scenarios, cfg.seed)
    search = stochastic.SearchConfig(max_nodes=cfg.max_nodes)
    sol = stochastic.solve_stochastic(scenarios, cfg.n_ambulances, edges, search)
    stochastic.save_solution(sol, out / "deployment_stochastic.json")
    rob = robust.solve_robust_ccg(
        uset, cfg.n_ambulances, edges,
        epsilon=cfg.epsilon, max_iter=cfg.ccg_max_iter,
        size_budget=cfg.set_size_budget, search_config=search,
    )
    if not rob.converged:
        log.warning("robust CCG stopped unconverged after %d iterations", rob.state.iterations)
    robust.save_robust_solution(rob, out / "deployment_robust.json", alpha=cfg.alpha)
    robust.save_ccg_history(rob.state, out / "ccg_history.csv")
    return {name: out / name for name in ("deployment_stochastic.json", "deployment_robust.json", "ccg_history.csv")}


def _load_deployment(path: Path, n: int) -> np.ndarray:
    with open(path) as f:
        doc = json.load(f)
    return np.array(doc["x"], dtype=np.int64)


def cmd_simulate(cfg: RunConfig, out: Path) -> dict[str, Path]:
    grid = _load_grid(cfg, out)
    model = calibrate.load_model(_require(out / "calibration.json", "fit"))
    test_calls, _ = ingest.parse_calls(_require(out / "calls_test.csv", "preprocess"))
    policies = []
    for label, fname in (("stochastic", "deployment_stochastic.json"), ("robust", "deployment_robust.json")):
        x = _load_deployment(_require(out / fname, "optimize"), cfg.n_ambulances)
        policies.append((label, x))
    params = _sim_params(cfg, model)
    comparison = simcore.compare_policies(
        policies, test_calls, grid, params,
        cfg.n_calls, cfg.n_batches, cfg.seed, cfg.sample_with_replacement,
    )
    _write_json(out / "sim_comparison.json", comparison.to_dict())
    files = {"sim_comparison.json": out / "sim_comparison.json"}
    # one event log per policy, first batch, for inspection and plotting
    batches = simcore._batch_slices(test_calls, cfg.n_calls, cfg.n_batches, cfg.seed, cfg.sample_with_replacement)
    for label, x in policies:
        outcome = simcore.simulate(x, batches[0], grid, params, seed=derive_seed(cfg.seed, "batch", 0))
        name = f"event_log_{label}.csv"
        simcore.save_event_log(outcome.event_log, out / name)
        files[name] = out / name
    return files


def cmd_verify(cfg: RunConfig, out: Path) -> dict[str, Path]:
    grid = _load_grid(cfg, out)
    model = calibrate.load_model(_require(out / "calibration.json", "fit"))
    test_calls, _ = ingest.parse_calls(_require(out / "calls_test.csv", "preprocess"))
    report = calibrate.verify(
        test_calls, grid, model, cfg.verify_batch_size, cfg.verify_n_batches, cfg.snap_cells
    )
    _write_json(out / "verification.json", report.to_dict())
    return {"verification.json": out / "verification.json"}


def cmd_alpha_cv(cfg: RunConfig, out: Path) -> dict[str, Path]:
    grid = _load_grid(cfg, out)
    calls, _ = _parse_calls(cfg)
    peak_calls = _peak(cfg, calls)
    edges = _edges(cfg, grid)
    adjacency = geogrid.derive_adjacency(grid)
    ball = geogrid.derive_region_ball(grid, cfg.coverage_threshold_s)
    search = stochastic.SearchConfig(max_nodes=cfg.max_nodes)
    table: list[list[float | None]] = []
    saturated: dict[float, bool] = {a: False for a in cfg.alphas}
    errors: list[str] = []
    for fold in range(cfg.cv_folds):
        train, test = ingest.split_train_test(
            peak_calls, cfg.train_fraction, "kfold", cfg.cv_folds, fold, cfg.seed
        )
        matrix = _demand_for_rates(cfg, train, grid)
        rates = demand.fit_rates(matrix, adjacency, ball)
        row: list[float | None] = []
        for alpha in cfg.alphas:
            uset = demand.build_uncertainty_set(rates, alpha, adjacency, ball)
            try:
                rob = robust.solve_robust_ccg(
                    uset, cfg.n_ambulances, edges,
                    epsilon=cfg.epsilon, max_iter=cfg.ccg_max_iter,
                    size_budget=cfg.set_size_budget, search_config=search,
                )
            except EmsDeployError as exc:
                errors.append(f"fold {fold} alpha {alpha}: {exc}")
                row.append(None)
                continue
            x = rob.x_star.x
            if np.all(x == 1):
                saturated[alpha] = True
            if x.sum() < 1:
                errors.append(
                    f"fold {fold} alpha {alpha}: degenerate zero stationing (worst case "
                    "not reducible by placement); cell skipped"
                )
                row.append(None)
                continue
            outcome = simcore.simulate(
                x, test, grid, _sim_params(cfg, None), seed=derive_seed(cfg.seed, "alphacv", fold)
            )
            row.append(outcome.mean_response_s / 60.0)
        table.append(row)
    with open(out / "alpha_cv.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["fold"] + [f"alpha_{a}" for a in cfg.alphas])
        for fold, row in enumerate(table):
            writer.writerow([fold + 1] + ["" if v is None else f"{v:.4f}" for v in row])
    means = {}
    for i, alpha in enumerate(cfg.alphas):
        vals = [row[i] for row in table if row[i] is not None]
        means[str(alpha)] = float(np.mean(vals)) if vals else None
    candidates = [
        a for a in cfg.alphas
        if not saturated[a] and means[str(a)] is not None
    ]
    recommended = min(candidates, key=lambda a: means[str(a)]) if candidates else None
    _write_json(out / "alpha_cv_summary.json", {
        "mean_mrt_minutes": means,
        "saturated": {str(a): saturated[a] for a in cfg.alphas},
        "recommended_alpha": recommended,
        "errors": errors,
    })
    return {"alpha_cv.csv": out / "alpha_cv.csv", "alpha_cv_summary.json": out / "alpha_cv_summary.json"}


def cmd_fleet_sweep(cfg: RunConfig, out: Path) -> dict[str, Path]:
    grid = _load_grid(cfg, out)
    matrix = ingest.load_demand_matrix(_require(out / "demand_matrix.csv", "preprocess"), cfg.period_length_s)
    model = calibrate.load_model(_require(out / "calibration.json", "fit"))
    test_calls, _ = ingest.parse_calls(_require(out / "calls_test.csv", "preprocess"))
    edges = _edges(cfg, grid)
    adjacency = geogrid.derive_adjacency(grid)
    ball = geogrid.derive_region_ball(grid, cfg.coverage_threshold_s)
    uset_caps = demand.load_uncertainty_set(_require(out / "uncertainty.json", "fit"), adjacency, ball)
    scenarios = stochastic.sample_scenarios(matrix, cfg.m_scenarios, cfg.seed)
    search = stochastic.SearchConfig(max_nodes=cfg.max_nodes)
    params = _sim_params(cfg, model)
    rows = []
    for n in range(cfg.n_min, cfg.n_max + 1):
        sol = stochastic.solve_stochastic(scenarios, n, edges, search)
        _, summary = simcore.run_batches(
            sol.x_star.x, test_calls, grid, params,
            cfg.n_calls, cfg.n_batches, cfg.seed, cfg.sample_with_replacement,
        )
        row = {"n": n, "stochastic_mrt_min": summary.overall_mean_s / 60.0}
        if cfg.sweep_robust:
            rob = robust.solve_robust_ccg(
                uset_caps, n, edges,
                epsilon=cfg.epsilon, max_iter=cfg.ccg_max_iter,
                size_budget=cfg.set_size_budget, search_config=search,
            )
            _, rsummary = simcore.run_batches(
                rob.x_star.x, test_calls, grid, params,
                cfg.n_calls, cfg.n_batches, cfg.seed, cfg.sample_with_replacement,
            )
            row["robust_mrt_min"] = rsummary.overall_mean_s / 60.0
        rows.append(row)
    with open(out / "fleet_sweep.csv", "w", newline="") as f:
        writer = csv.writer(f)
        header = ["n", "stochastic_mrt_min"] + (["robust_mrt_min"] if cfg.sweep_robust else [])
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[h] if h == "n" else f"{row[h]:.4f}" for h in header])
    return {"fleet_sweep.csv": out / "fleet_sweep.csv"}


def cmd_analyze(cfg: RunConfig, out: Path) -> dict[str, Path]:
    grid = _load_grid(cfg, out)
    calls, _ = _parse_calls(cfg)
    if not cfg.svi_csv or not cfg.tract_map_csv:
        raise ConfigError("analyze requires svi_csv and tract_map_csv")
    svi = analysis.load_svi_table(cfg.svi_csv)
    tract_map = analysis.load_tract_map(cfg.tract_map_csv)
    dataset = analysis.assemble_tracts(_peak(cfg, calls), grid, tract_map, svi, cfg.snap_cells)
    reports = analysis.compare_models(dataset, cfg.analysis_folds, cfg.seed, cfg.lambda_grid)
    analysis.save_model_reports(reports, out / "analysis_report.csv")
    _write_json(out / "analysis_details.json", {
        "n_tracts": len(dataset.tract_ids),
        "n_dropped_no_svi": dataset.n_dropped_no_svi,
        "n_tracts_no_calls": dataset.n_tracts_no_calls,
        "models": [
            {"model": r.label, "variables": r.variables, "fold_mses": r.fold_mses, "average_mse": r.average_mse}
            for r in reports
        ],
    })
    return {name: out / name for name in ("analysis_report.csv", "analysis_details.json")}


def cmd_plotdata(cfg: RunConfig, out: Path) -> dict[str, Path]:
    grid = _load_grid(cfg, out)
    files: dict[str, Path] = {}
    calls, _ = _parse_calls(cfg)

    with open(out / "plot_temporal_heatmap.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["weekday", "hour", "count"])
        counts = np.zeros((7, 24), dtype=np.int64)
        for r in calls:
            counts[r.timestamp.weekday(), r.timestamp.hour] += 1
        for wd in range(7):
            for hour in range(24):
                writer.writerow([wd, hour, int(counts[wd, hour])])
    files["plot_temporal_heatmap.csv"] = out / "plot_temporal_heatmap.csv"

    with open(out / "plot_spatial_heatmap.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["cell", "lat", "lon", "count"])
        cell_counts = np.zeros(grid.n_cells, dtype=np.int64)
        for r in calls:
            try:
                cell_counts[geogrid.assign_cell(grid, r.lat, r.lon, cfg.snap_cells)] += 1
            except EmsDeployError:
                continue
        for j in range(grid.n_cells):
            lat, lon = grid.cell_centers[j]
            writer.writerow([j, repr(lat), repr(lon), int(cell_counts[j])])
    files["plot_spatial_heatmap.csv"] = out / "plot_spatial_heatmap.csv"

    model = calibrate.load_model(_require(out / "calibration.json", "fit"))
    test_calls, _ = ingest.parse_calls(_require(out / "calls_test.csv", "preprocess"))
    pairs, _ = ingest.calibration_pairs(test_calls, grid, cfg.snap_cells)
    with open(out / "plot_regression_scatter.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["grid_s", "reported_s", "adjusted_s"])
        for g, r in pairs:
            writer.writerow([repr(g), repr(r), repr(calibrate.apply(model, g))])
    files["plot_regression_scatter.csv"] = out / "plot_regression_scatter.csv"

    with open(_require(out / "verification.json", "verify")) as f:
        vdoc = json.load(f)
    with open(out / "plot_verification_points.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["batch", "mean_error_s"])
        for i, err in enumerate(vdoc["batch_errors_s"], start=1):
            writer.writerow([i, repr(err)])
    files["plot_verification_points.csv"] = out / "plot_verification_points.csv"

    for label, fname in (("stochastic", "deployment_stochastic.json"), ("robust", "deployment_robust.json")):
        x = _load_deployment(_require(out / fname, "optimize"), cfg.n_ambulances)
        name = f"plot_stationing_{label}.csv"
        with open(out / name, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["station", "cell", "lat", "lon", "count"])
            for i, cell in enumerate(grid.station_cells):
                lat, lon = grid.cell_centers[cell]
                writer.writerow([i, cell, repr(lat), repr(lon), int(x[i])])
        files[name] = out / name
    return files


COMMANDS = {
    "grid": cmd_grid,
    "preprocess": cmd_preprocess,
    "fit": cmd_fit,
    "optimize": cmd_optimize,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "alpha-cv": cmd_alpha_cv,
    "fleet-sweep": cmd_fleet_sweep,
    "analyze": cmd_analyze,
    "plotdata": cmd_plotdata,
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _parse_overrides(extra: list[str]) -> dict[str, object]:
    overrides: dict[str, object] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument: {tok!r}")
        key = tok[2:].replace("-", "_")
        if i + 1 >= len(extra):
            raise ConfigError(f"override --{key} needs a value")
        overrides[key] = extra[i + 1]
        i += 2
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="emsdeploy",
        description="Ambulance stationing pipeline: optimize and simulate deployments.",
    )
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--out", default="emsdeploy_out", help="output directory")
    parser.add_argument("--seed", type=int, help="root seed override")
    args, extra = parser.parse_known_args(argv)

    logging.basicConfig(
        level=os.environ.get("EMSDEPLOY_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        overrides = _parse_overrides(extra)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.subcommand](cfg, out)
        config_path = out / "config_resolved.json"
        _write_json(config_path, cfg.to_dict())
        files["config_resolved.json"] = config_path
        manifest = {
            "subcommand": args.subcommand,
            "config": cfg.to_dict(),
            "files": {name: _sha256(path) for name, path in sorted(files.items())},
        }
        _write_json(out / "manifest.json", manifest)
        print(f"emsdeploy {args.subcommand}: wrote {len(files)} files to {out}")
        return 0
    except ConfigError as exc:
        log.error("config error: %s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        log.error("data error: %s", exc)
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except SolverError as exc:
        log.error("solver error: %s", exc)
        print(f"solver error: {exc}", file=sys.stderr)
        return 4
    except EmsDeployError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
