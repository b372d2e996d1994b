"""Tracks, gates, reference trajectories and arc-length paths."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import yaml
from numpy.typing import NDArray
from scipy.interpolate import CubicSpline

from .dynamics import yaw_quaternion

REFERENCE_COLUMNS = ("t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz")
PATH_COLUMNS = ("theta", "px", "py", "pz", "tx", "ty", "tz")
ARC_SPACING = 0.05


class TrackFormatError(ValueError):
    """Malformed or inconsistent track / reference / path file."""


@dataclass(frozen=True)
class Gate:
    center: NDArray[np.float64]
    normal: NDArray[np.float64]
    half_extent: float = 0.75

    def __post_init__(self) -> None:
        c = np.asarray(self.center, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        if c.shape != (3,) or n.shape != (3,):
            raise TrackFormatError("gate center and normal must be 3-vectors")
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise TrackFormatError("gate normal must be non-zero")
        if not self.half_extent > 0:
            raise TrackFormatError(f"gate half_extent must be positive, got {self.half_extent}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "normal", n / norm)


@dataclass(frozen=True)
class Track:
    """Ordered gates flown ``laps`` times from a hover start.

    Gate normals point along the nominal flight direction; the side a gate is
    approached from is the "front".
    """

    gates: tuple[Gate, ...]
    laps: int = 1
    start_position: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    start_yaw: float = 0.0
    name: str = "track"

    def __post_init__(self) -> None:
        if len(self.gates) < 1:
            raise TrackFormatError("track needs at least one gate")
        if int(self.laps) < 1:
            raise TrackFormatError(f"laps must be >= 1, got {self.laps}")
        object.__setattr__(self, "gates", tuple(self.gates))
        object.__setattr__(self, "laps", int(self.laps))
        object.__setattr__(self, "start_position", np.asarray(self.start_position, dtype=np.float64))

    @property
    def total_gates(self) -> int:
        return len(self.gates) * self.laps

    def gate_arrays(self) -> tuple[NDArray, NDArray, NDArray]:
        """Centers, normals and half-extents for the full race (all laps)."""
        centers = np.array([g.center for g in self.gates] * self.laps)
        normals = np.array([g.normal for g in self.gates] * self.laps)
        extents = np.array([g.half_extent for g in self.gates] * self.laps)
        return centers, normals, extents

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "laps": self.laps,
            "start": {"position": [float(x) for x in self.start_position], "yaw": float(self.start_yaw)},
            "gates": [
                {
                    "center": [float(x) for x in g.center],
                    "normal": [float(x) for x in g.normal],
                    "half_extent": float(g.half_extent),
                }
                for g in self.gates
            ],
        }


def _vector(entry, key: str, where: str) -> list[float]:
    if key not in entry:
        raise TrackFormatError(f"{where}: missing key {key!r}")
    value = entry[key]
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise TrackFormatError(f"{where}: key {key!r} must be a list of 3 numbers")
    try:
        return [float(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise TrackFormatError(f"{where}: key {key!r} must be numeric") from exc


def track_from_dict(data) -> Track:
    if not isinstance(data, dict):
        raise TrackFormatError("track file must contain a mapping at top level")
    unknown = set(data) - {"name", "laps", "start", "gates"}
    if unknown:
        raise TrackFormatError(f"unknown key {sorted(unknown)[0]!r}")
    gates_raw = data.get("gates")
    if gates_raw is None:
        raise TrackFormatError("missing key 'gates'")
    if not isinstance(gates_raw, list):
        raise TrackFormatError("key 'gates' must be a list")
    if not gates_raw:
        raise TrackFormatError("track needs at least one gate")
    gates = []
    for i, entry in enumerate(gates_raw):
        where = f"gates[{i}]"
        if not isinstance(entry, dict):
            raise TrackFormatError(f"{where}: must be a mapping")
        extent = entry.get("half_extent", 0.75)
        if not isinstance(extent, (int, float)):
            raise TrackFormatError(f"{where}: key 'half_extent' must be numeric")
        gates.append(Gate(np.array(_vector(entry, "center", where)), np.array(_vector(entry, "normal", where)), float(extent)))
    start = data.get("start", {}) or {}
    if not isinstance(start, dict):
        raise TrackFormatError("key 'start' must be a mapping")
    position = _vector(start, "position", "start") if "position" in start else list(gates[0].center)
    laps = data.get("laps", 1)
    if not isinstance(laps, int):
        raise TrackFormatError("key 'laps' must be an integer")
    return Track(
        gates=tuple(gates),
        laps=laps,
        start_position=np.array(position),
        start_yaw=float(start.get("yaw", 0.0)),
        name=str(data.get("name", "track")),
    )


def load_track(path) -> Track:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise TrackFormatError(f"{path}: not valid YAML: {exc}") from exc
    return track_from_dict(data)


def save_track(track: Track, path) -> None:
    Path(path).write_text(yaml.safe_dump(track.to_dict(), sort_keys=False))


# --------------------------------------------------------------------------
# Reference trajectories


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Time-stamped full-state reference, rows ``[p v q w]``."""

    times: NDArray[np.float64]
    states: NDArray[np.float64]

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=np.float64)
        s = np.array(self.states, dtype=np.float64)
        if t.ndim != 1 or len(t) < 1:
            raise TrackFormatError("reference needs at least one sample")
        if s.shape != (len(t), 13):
            raise TrackFormatError(f"reference states must have shape ({len(t)}, 13), got {s.shape}")
        bad = np.nonzero(np.diff(t) <= 0)[0]
        if len(bad):
            raise TrackFormatError(f"reference timestamps not strictly increasing at row {bad[0] + 1}")
        s[:, 6:10] /= np.linalg.norm(s[:, 6:10], axis=1, keepdims=True)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def positions(self) -> NDArray[np.float64]:
        return self.states[:, 0:3]


def load_reference(path) -> ReferenceTrajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TrackFormatError(f"{path}: empty reference file") from None
        for col in REFERENCE_COLUMNS:
            if col not in header:
                raise TrackFormatError(f"{path}: missing column {col!r}")
        idx = [header.index(c) for c in REFERENCE_COLUMNS]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[i]) for i in idx])
            except (ValueError, IndexError) as exc:
                raise TrackFormatError(f"{path}: bad value on row {lineno}") from exc
    if not rows:
        raise TrackFormatError(f"{path}: reference has no data rows")
    data = np.array(rows)
    try:
        return ReferenceTrajectory(data[:, 0], data[:, 1:])
    except TrackFormatError as exc:
        # row numbers in the message are data rows; shift to file lines
        raise TrackFormatError(f"{path}: {exc} (file line = row + 1)") from exc


def save_reference(ref: ReferenceTrajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REFERENCE_COLUMNS)
        for t, s in zip(ref.times, ref.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in s])


def _slerp(q0, q1, f):
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    if d > 1.0 - 1e-12:
        q = q0 + f * (q1 - q0)
    else:
        a = math.acos(min(d, 1.0))
        s = math.sin(a)
        q = (math.sin((1 - f) * a) * q0 + math.sin(f * a) * q1) / s
    return q / np.linalg.norm(q)


def sample_reference(ref: ReferenceTrajectory, t) -> NDArray[np.float64]:
    """Reference state at time(s) ``t``; held constant outside the sampled range."""
    scalar = np.ndim(t) == 0
    ts = np.clip(np.atleast_1d(np.asarray(t, dtype=np.float64)), ref.times[0], ref.times[-1])
    n = len(ref.times)
    out = np.empty((len(ts), 13))
    for j, tj in enumerate(ts):
        i = int(np.searchsorted(ref.times, tj, side="right")) - 1
        if i >= n - 1:
            out[j] = ref.states[-1]
            continue
        t0, t1 = ref.times[i], ref.times[i + 1]
        f = (tj - t0) / (t1 - t0)
        a, b = ref.states[i], ref.states[i + 1]
        out[j] = a + f * (b - a)
        out[j, 6:10] = _slerp(a[6:10], b[6:10], f)
    return out[0] if scalar else out


def generate_circle_reference(
    radius: float,
    speed: float,
    height: float,
    duration: float,
    dt: float = 0.01,
    phase: float = 0.0,
    center=(0.0, 0.0),
    ramp: float = 0.0,
) -> ReferenceTrajectory:
    """Counter-clockwise circle with yaw along the velocity.

    With ``ramp > 0`` the speed rises linearly from rest over ``ramp``
    seconds, so the reference starts at hover.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    if speed < 0:
        raise ValueError("speed must be non-negative")
    if ramp < 0:
        raise ValueError("ramp must be non-negative")
    n = max(2, int(round(duration / dt)) + 1)
    t = np.linspace(0.0, duration, n)
    if ramp > 0:
        v = speed * np.minimum(t / ramp, 1.0)
        arc = np.where(t < ramp, 0.5 * speed * t**2 / ramp, speed * (t - 0.5 * ramp))
    else:
        v = np.full(n, float(speed))
        arc = speed * t
    ang = phase + arc / radius
    s = np.zeros((n, 13))
    s[:, 0] = center[0] + radius * np.cos(ang)
    s[:, 1] = center[1] + radius * np.sin(ang)
    s[:, 2] = height
    s[:, 3] = -v * np.sin(ang)
    s[:, 4] = v * np.cos(ang)
    yaw = ang + math.pi / 2
    s[:, 6] = np.cos(yaw / 2)
    s[:, 9] = np.sin(yaw / 2)
    s[:, 12] = v / radius
    return ReferenceTrajectory(t, s)


def circle_reference_for(track: Track, speed: float, ramp: float = 1.0, margin: float = 2.0, dt: float = 0.01) -> ReferenceTrajectory:
    """Reference around a circle fixture starting at its start position, long enough for every lap."""
    c = np.array([g.center for g in track.gates])
    center = c[:, :2].mean(axis=0)
    radius = float(np.linalg.norm(c[0, :2] - center))
    rel = track.start_position[:2] - center
    phase = math.atan2(rel[1], rel[0])
    duration = track.laps * 2 * math.pi * radius / speed + 0.5 * ramp + margin
    return generate_circle_reference(radius, speed, float(track.start_position[2]), duration, dt, phase, tuple(center), ramp)


# --------------------------------------------------------------------------
# Arc-length paths


@numba.njit(cache=True)
def _path_eval(theta, h, coef):
    """Position and unit tangent of a uniform-knot cubic spline at ``theta``."""
    n = coef.shape[0]
    s = min(max(theta, 0.0), h * n)
    i = min(int(s / h), n - 1)
    d = s - i * h
    p = np.empty(3)
    t = np.empty(3)
    for j in range(3):
        c0, c1, c2, c3 = coef[i, 0, j], coef[i, 1, j], coef[i, 2, j], coef[i, 3, j]
        p[j] = ((c0 * d + c1) * d + c2) * d + c3
        t[j] = (3.0 * c0 * d + 2.0 * c1) * d + c2
    nt = math.sqrt(t[0] ** 2 + t[1] ** 2 + t[2] ** 2)
    for j in range(3):
        t[j] /= nt
    return p, t


class ArcPath:
    """Natural cubic spline over positions resampled at uniform arc spacing."""

    def __init__(self, knots: NDArray[np.float64], spacing: float):
        self.knots = np.asarray(knots, dtype=np.float64)
        self.spacing = float(spacing)
        s = np.arange(len(self.knots)) * self.spacing
        spline = CubicSpline(s, self.knots, bc_type="natural")
        # (pieces, 4, 3), highest power first
        self.coef = np.ascontiguousarray(np.transpose(spline.c, (1, 0, 2)))
        self.length = float(s[-1])

    def position(self, theta):
        return self._eval(theta)[0]

    def tangent(self, theta):
        return self._eval(theta)[1]

    def _eval(self, theta):
        if np.ndim(theta) == 0:
            return _path_eval(float(theta), self.spacing, self.coef)
        th = np.asarray(theta, dtype=np.float64)
        ps = np.empty(th.shape + (3,))
        ts = np.empty(th.shape + (3,))
        for idx, v in np.ndenumerate(th):
            ps[idx], ts[idx] = _path_eval(float(v), self.spacing, self.coef)
        return ps, ts

    def project(self, p, guess: float, window: float = 2.0, resolution: float = 0.01) -> float:
        """Arc length of the closest path point to ``p`` within ``guess ± window``."""
        lo, hi = max(0.0, guess - window), min(self.length, guess + window)
        grid = np.linspace(lo, hi, max(2, int((hi - lo) / resolution) + 1))
        pts = self.position(grid)
        return float(grid[np.argmin(np.sum((pts - np.asarray(p)) ** 2, axis=1))])

    def save(self, path, spacing: float | None = None) -> None:
        step = spacing or self.spacing
        thetas = np.arange(0.0, self.length + 1e-9, step)
        ps, ts = self._eval(thetas)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PATH_COLUMNS)
            for th, p, t in zip(thetas, ps, ts):
                w.writerow([repr(float(th))] + [repr(float(v)) for v in (*p, *t)])


def build_arc_path(positions, spacing: float = ARC_SPACING) -> ArcPath:
    pts = np.asarray(positions, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise TrackFormatError("path positions must be an (N, 3) array")
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-12
    pts = pts[keep]
    if len(pts) < 2:
        raise TrackFormatError("path needs at least two distinct points")
    chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    n = max(2, int(math.floor(chord[-1] / spacing + 1e-9)) + 1)
    s = np.arange(n) * spacing
    knots = np.column_stack([np.interp(s, chord, pts[:, j]) for j in range(3)])
    return ArcPath(knots, spacing)


def load_path(path) -> ArcPath:
    """Rebuild an :class:`ArcPath` from an exported path CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TrackFormatError(f"{path}: empty path file") from None
        for col in ("px", "py", "pz"):
            if col not in header:
                raise TrackFormatError(f"{path}: missing column {col!r}")
        idx = [header.index(c) for c in ("px", "py", "pz")]
        pts = [[float(row[i]) for i in idx] for row in reader if row]
    return build_arc_path(np.array(pts))


def gate_polyline(track: Track, laps: int | None = None, samples_per_gate: int = 40) -> NDArray[np.float64]:
    """Smooth closed curve through the start and gate centers, repeated for each lap.

    A periodic cubic spline through the gate centers is used for the loop;
    the start position is joined to the first gate by a straight segment.
    """
    laps = track.laps if laps is None else laps
    centers = np.array([g.center for g in track.gates])
    if len(centers) == 1:
        return np.array([track.start_position, centers[0], centers[0] + track.gates[0].normal])
    loop = np.vstack([centers, centers[:1]])
    u = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(loop, axis=0), axis=1))])
    spline = CubicSpline(u, loop, bc_type="periodic")
    uu = np.linspace(0, u[-1], samples_per_gate * len(centers), endpoint=False)
    lap = spline(uu)
    out = [track.start_position[None, :]]
    out.extend([lap] * laps)
    # run-out past the final gate so progress never saturates at the finish
    out.append(lap[: max(2, len(lap) // 4)])
    return np.vstack(out)


# --------------------------------------------------------------------------
# Fixture layouts


def circle_track(radius: float = 5.0, gates: int = 7, height: float = 1.5, laps: int = 3, half_extent: float = 0.75) -> Track:
    """Gates evenly spaced counter-clockwise; start half a spacing before gate 0."""
    spacing = 2 * math.pi / gates
    gs = []
    for i in range(gates):
        a = i * spacing
        gs.append(Gate(np.array([radius * math.cos(a), radius * math.sin(a), height]), np.array([-math.sin(a), math.cos(a), 0.0]), half_extent))
    a0 = -spacing / 2
    start = np.array([radius * math.cos(a0), radius * math.sin(a0), height])
    return Track(tuple(gs), laps, start, a0 + math.pi / 2, f"circle-r{radius:g}")


def _lemniscate(t, width, height_span):
    a = width / 2
    b = height_span
    return a * np.sin(t), b * np.sin(t) * np.cos(t)


def figure8_track(width: float = 14.0, span: float = 7.0, gates: int = 7, height: float = 1.5, laps: int = 3, half_extent: float = 0.75) -> Track:
    """Gerono lemniscate fitting a ``width`` x ``span`` box; no gate at the crossing."""
    gs = []
    for i in range(gates):
        t = math.pi * (1 + 4 * i) / (2 * gates)
        x, y = _lemniscate(t, width, span)
        dx = width / 2 * math.cos(t)
        dy = span * math.cos(2 * t)
        gs.append(Gate(np.array([x, y, height]), np.array([dx, dy, 0.0]), half_extent))
    t0 = -math.pi / (2 * gates)
    x, y = _lemniscate(t0, width, span)
    return Track(tuple(gs), laps, np.array([x, y, height]), math.atan2(span * math.cos(2 * t0), width / 2 * math.cos(t0)), "figure8")


def splits_track(laps: int = 3, half_extent: float = 0.75, top: float = 3.5, bottom: float = 1.2) -> Track:
    """Oval with a stacked gate pair: through the top gate, half-roll, back through the bottom one."""
    layout = [
        ((-4.0, 0.0, 1.5), (1.0, 0.0, 0.0)),
        ((0.0, 0.0, 2.5), (1.0, 0.0, 0.4)),
        ((4.0, 0.0, top), (1.0, 0.0, 0.0)),
        ((4.0, 0.0, bottom), (-1.0, 0.0, 0.0)),
        ((0.0, 3.0, 1.5), (-0.8, 0.6, 0.0)),
        ((-6.0, 3.0, 1.5), (-1.0, 0.0, 0.0)),
        ((-8.0, 1.5, 1.5), (0.0, -1.0, 0.0)),
    ]
    gs = tuple(Gate(np.array(c), np.array(n), half_extent) for c, n in layout)
    return Track(gs, laps, np.array([-7.0, 0.0, 1.5]), 0.0, "split-s")


TRACK_SHAPES = {"circle": circle_track, "figure8": figure8_track, "splits": splits_track}


def start_attitude(track: Track) -> NDArray[np.float64]:
    return yaw_quaternion(track.start_yaw)
