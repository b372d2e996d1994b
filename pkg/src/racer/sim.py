"""Closed-loop race simulation, run logs and racing metrics."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .dynamics import NX, RolloutDiverged, VehicleParams, VehicleState, step
from .mppi import MppiConfig, MppiController
from .objectives import (
    ContouringObjective,
    ContouringWeights,
    GateProgressObjective,
    GateProgressWeights,
    Objective,
    TrackingObjective,
    TrackingWeights,
    _crosses,
)
from .track import ArcPath, ReferenceTrajectory, Track, build_arc_path, gate_polyline, sample_reference

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz",
    "T1", "T2", "T3", "T4", "u1", "u2", "u3", "u4", "target_gate", "min_cost", "ess",
)


class SetupError(ValueError):
    """Inconsistent race configuration detected before the loop starts."""


class LogFormatError(ValueError):
    """Run-log CSV that does not follow the log schema."""


@dataclass
class SimConfig:
    control_rate: float = 50.0
    max_time: float = 30.0
    substeps: int = 10
    floor: float = 0.0
    bound: float = 100.0
    param_perturbation: float = 0.0

    def __post_init__(self) -> None:
        if not self.control_rate > 0:
            raise ValueError("control_rate must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def period(self) -> float:
        return 1.0 / self.control_rate


@dataclass
class ObjectiveSpec:
    """Which objective to race with and what it needs."""

    name: str
    weights: dict = field(default_factory=dict)
    reference: ReferenceTrajectory | None = None
    path: ArcPath | None = None
    temporal: bool = True


@dataclass
class RunLog:
    """One row per control step plus exact gate-pass events ``(gate, time)``."""

    times: NDArray[np.float64]
    states: NDArray[np.float64]
    inputs: NDArray[np.float64]
    target_gate: NDArray[np.int64]
    min_cost: NDArray[np.float64]
    ess: NDArray[np.float64]
    passes: list[tuple[int, float]] = field(default_factory=list)

    @property
    def positions(self) -> NDArray[np.float64]:
        return self.states[:, 0:3]

    def __len__(self) -> int:
        return len(self.times)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for i in range(len(self.times)):
                row = [self.times[i], *self.states[i], *self.inputs[i]]
                w.writerow([repr(float(v)) for v in row] + [int(self.target_gate[i]), repr(float(self.min_cost[i])), repr(float(self.ess[i]))])

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = tuple(h.strip() for h in next(reader))
            except StopIteration:
                raise LogFormatError(f"{path}: empty log") from None
            missing = [c for c in LOG_COLUMNS if c not in header]
            if missing:
                raise LogFormatError(f"{path}: missing column {missing[0]!r}")
            idx = [header.index(c) for c in LOG_COLUMNS]
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    rows.append([float(row[i]) for i in idx])
                except (ValueError, IndexError) as exc:
                    raise LogFormatError(f"{path}: malformed row {lineno}") from exc
        if not rows:
            raise LogFormatError(f"{path}: log has no data rows")
        a = np.array(rows)
        target = a[:, 22].astype(np.int64)
        passes = [(int(target[i - 1]), float(a[i, 0])) for i in range(1, len(a)) if target[i] > target[i - 1]]
        return cls(a[:, 0], a[:, 1:18], a[:, 18:22], target, a[:, 23], a[:, 24], passes)


@dataclass
class RaceResult:
    outcome: str
    flight_time: float
    waypoint_distances: list[float]
    lap_times: list[float]
    tracking_rmse: tuple[float, float] | None
    log: RunLog
    saturation: float = 0.0

    def summary(self) -> dict:
        wd = np.asarray(self.waypoint_distances)
        return {
            "outcome": self.outcome,
            "flight_time": float(self.flight_time),
            "lap_times": [float(x) for x in self.lap_times],
            "waypoint_distances": [float(x) for x in wd],
            "waypoint_distance_mean": float(wd.mean()) if len(wd) else None,
            "waypoint_distance_std": float(wd.std()) if len(wd) else None,
            "tracking_rmse": None if self.tracking_rmse is None else [float(x) for x in self.tracking_rmse],
            "gates_passed": len(self.log.passes),
            "saturation_fraction": float(self.saturation),
        }


# --------------------------------------------------------------------------
# Metrics


def _pass_times(log: RunLog) -> dict[int, float]:
    return {g: t for g, t in log.passes}


def waypoint_distance(log: RunLog, track: Track) -> list[float]:
    """Closest logged approach to each gate reached so far.

    The search window for gate i runs from the pass of gate i-1 to the pass
    of gate i+1 (or the log ends).
    """
    if len(log) == 0:
        raise ValueError("empty log")
    centers = track.gate_arrays()[0]
    passes = _pass_times(log)
    reached = min(len(passes) + 1, track.total_gates)
    P = log.positions
    out = []
    for i in range(reached):
        lo = passes.get(i - 1, -math.inf)
        hi = passes.get(i + 1, math.inf)
        mask = (log.times >= lo) & (log.times <= hi)
        if not mask.any():
            mask = np.ones(len(log), dtype=bool)
        out.append(float(np.min(np.linalg.norm(P[mask] - centers[i], axis=1))))
    return out


def tracking_rmse(log: RunLog, ref: ReferenceTrajectory) -> tuple[float, float]:
    """Root mean square and standard deviation of the position error magnitude."""
    if log.times[-1] > ref.times[-1] + 1e-12:
        warnings.warn("log extends past the reference; holding the final reference state", stacklevel=2)
    err = np.linalg.norm(log.positions - sample_reference(ref, log.times)[:, 0:3], axis=1)
    return float(np.sqrt(np.mean(err**2))), float(np.std(err))


def lap_timer(log: RunLog, track: Track) -> tuple[list[float], float | None]:
    """Lap times between passes of each lap's final gate, timed from t = 0.

    The total is only reported when every lap was completed.
    """
    passes = _pass_times(log)
    n = len(track.gates)
    ends = [passes[(lap + 1) * n - 1] for lap in range(track.laps) if (lap + 1) * n - 1 in passes]
    laps = list(np.diff([0.0, *ends]))
    total = ends[-1] if len(ends) == track.laps else None
    return [float(x) for x in laps], total


def saturation_fraction(log: RunLog, params: VehicleParams, level: float = 0.95) -> float:
    """Share of control steps whose collective thrust is at least ``level`` of the maximum."""
    total = log.states[:, 13:17].sum(axis=1)
    return float(np.mean(total >= level * 4 * params.thrust_max)) if len(total) else 0.0


# --------------------------------------------------------------------------
# Race loop


def make_objective(spec: ObjectiveSpec | Objective, track: Track, config: MppiConfig) -> Objective:
    if isinstance(spec, Objective):
        return spec
    w = dict(spec.weights or {})
    if spec.name == "tracking":
        if spec.reference is None:
            raise SetupError("tracking objective needs a reference trajectory")
        return TrackingObjective(spec.reference, TrackingWeights.blocks(**w) if w else None, config.dt, config.horizon)
    if spec.name == "contouring":
        path = spec.path
        if path is None and spec.reference is not None:
            path = build_arc_path(spec.reference.positions)
        if path is None:
            raise SetupError("contouring objective needs a reference or a path")
        bounds = w.pop("progress_accel_bounds", (-20.0, 20.0))
        return ContouringObjective(path, ContouringWeights(**w), bounds)
    if spec.name == "gate_progress":
        return GateProgressObjective(track, GateProgressWeights(**w), temporal=spec.temporal)
    raise SetupError(f"unknown objective {spec.name!r}; expected tracking, contouring or gate_progress")


def _perturbed(params: VehicleParams, scale: float, seed: int) -> VehicleParams:
    if scale <= 0:
        return params
    rng = np.random.default_rng(seed)
    a, b = 1 + rng.uniform(-scale, scale, size=2)
    return VehicleParams(**{**params.__dict__, "mass": params.mass * a, "inertia": tuple(j * b for j in params.inertia)})


def start_state(track: Track, params: VehicleParams) -> NDArray[np.float64]:
    return VehicleState.hover(track.start_position, params, track.start_yaw).to_array()


def run_race(
    track: Track,
    objective: ObjectiveSpec | Objective,
    mppi: MppiConfig,
    sim: SimConfig,
    seed: int = 0,
    params: VehicleParams | None = None,
    x0=None,
) -> RaceResult:
    """Fly ``track`` in closed loop and collect metrics.

    The plant uses the same integrator as the controller's rollouts, run at
    ``sim.substeps`` finer steps per control period.
    """
    params = params or VehicleParams.preset("real")
    config = MppiConfig(**{**mppi.__dict__, "seed": seed})
    obj = make_objective(objective, track, config)
    ctrl = MppiController(obj, params, config)
    plant = _perturbed(params, sim.param_perturbation, seed)

    centers, normals, extents = track.gate_arrays()
    total = track.total_gates
    x = start_state(track, params) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    dt_plant = sim.period / sim.substeps
    n_steps = int(math.floor(sim.max_time * sim.control_rate + 1e-9))

    rows_t, rows_x, rows_u, rows_g, rows_c, rows_e = [], [], [], [], [], []
    passes: list[tuple[int, float]] = []
    gate = 0
    outcome = "timeout"
    for step_idx in range(n_steps):
        t = step_idx * sim.period
        u, _, diag = ctrl.control_step(x, t, gate)
        u = u[:4]
        rows_t.append(t)
        rows_x.append(x.copy())
        rows_u.append(u.copy())
        rows_g.append(gate)
        rows_c.append(diag.min_cost)
        rows_e.append(diag.ess)
        crashed = False
        for sub in range(sim.substeps):
            try:
                x_new = step(x, u, dt_plant, plant)
            except RolloutDiverged:
                crashed = True
                break
            if gate < total and _crosses(x[0:3], x_new[0:3], centers[gate], normals[gate], extents[gate]):
                sa = float(np.dot(centers[gate] - x[0:3], normals[gate]))
                sb = float(np.dot(centers[gate] - x_new[0:3], normals[gate]))
                passes.append((gate, t + (sub + sa / (sa - sb)) * dt_plant))
                gate += 1
            x = x_new
            if x[2] < sim.floor or np.linalg.norm(x[0:3]) > sim.bound:
                crashed = True
                break
            if gate >= total:
                break
        if crashed:
            outcome = "crashed"
            break
        if gate >= total:
            outcome = "finished"
            break

    run_log = RunLog(
        np.array(rows_t), np.array(rows_x).reshape(-1, NX), np.array(rows_u).reshape(-1, 4),
        np.array(rows_g, dtype=np.int64), np.array(rows_c), np.array(rows_e), passes,
    )
    laps, total_time = lap_timer(run_log, track)
    flight_time = total_time if outcome == "finished" else (passes[-1][1] if passes else 0.0)
    rmse = None
    if isinstance(obj, TrackingObjective):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rmse = tracking_rmse(run_log, obj.reference)
    log.debug("race %s: %s after %.2fs, %d gates", track.name, outcome, flight_time, len(passes))
    return RaceResult(
        outcome=outcome,
        flight_time=float(flight_time),
        waypoint_distances=waypoint_distance(run_log, track),
        lap_times=laps,
        tracking_rmse=rmse,
        log=run_log,
        saturation=saturation_fraction(run_log, params),
    )


def contouring_path_for(track: Track) -> ArcPath:
    """Arc-length path through the gate centers when no reference is supplied."""
    return build_arc_path(gate_polyline(track))
