"""Interchangeable racing objectives for the sampling controller.

Each objective knows how to turn a batch of candidate control sequences into
total costs (rollout + objective + rate-limit penalty) inside one parallel
kernel, and exposes the same cost on a single trajectory for checking.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import prange
from numpy.typing import NDArray

from .dynamics import NU, NX, _progress, _rate_excess, _rollout
from .track import ArcPath, ReferenceTrajectory, Track, _path_eval, sample_reference

NX_PROGRESS = NX + 2
THETA, THETA_RATE = NX, NX + 1


# --------------------------------------------------------------------------
# Weights


def _diag(value, n: int) -> NDArray[np.float64]:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (n,)).copy()
    if np.any(arr < 0):
        raise ValueError("weights must be non-negative")
    return arr


@dataclass
class TrackingWeights:
    """Diagonal weights; state blocks ordered position, velocity, attitude, rates."""

    state: NDArray[np.float64] = field(default_factory=lambda: np.repeat([100.0, 10.0, 10.0, 1.0], 3))
    inputs: NDArray[np.float64] = field(default_factory=lambda: np.full(4, 0.01))
    terminal: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        self.state = _diag(self.state, 12)
        self.inputs = _diag(self.inputs, 4)
        self.terminal = self.state.copy() if self.terminal is None else _diag(self.terminal, 12)

    @classmethod
    def blocks(cls, position=100.0, velocity=10.0, attitude=10.0, rate=1.0, inputs=0.01, terminal_scale=1.0):
        state = np.concatenate([_diag(b, 3) for b in (position, velocity, attitude, rate)])
        return cls(state, _diag(inputs, 4), state * terminal_scale)

    def scaled(self, s: float) -> "TrackingWeights":
        return TrackingWeights(self.state * s, self.inputs * s, self.terminal * s)


@dataclass
class ContouringWeights:
    lag: float = 100.0
    contour: float = 50.0
    rates: NDArray[np.float64] = field(default_factory=lambda: np.full(3, 0.1))
    progress_accel: float = 0.01
    thrust_change: NDArray[np.float64] = field(default_factory=lambda: np.full(4, 0.01))
    progress_reward: float = 3.0
    max_progress_rate: float = 15.0

    def __post_init__(self) -> None:
        self.rates = _diag(self.rates, 3)
        self.thrust_change = _diag(self.thrust_change, 4)
        if min(self.lag, self.contour, self.progress_accel, self.progress_reward) < 0:
            raise ValueError("contouring weights must be non-negative")
        if not self.max_progress_rate > 0:
            raise ValueError("max_progress_rate must be positive")

    def as_array(self) -> NDArray[np.float64]:
        return np.concatenate(
            [[self.lag, self.contour], self.rates, [self.progress_accel], self.thrust_change, [self.progress_reward, self.max_progress_rate]]
        )


@dataclass
class GateProgressWeights:
    near_weight: float = 2.0
    near_radius: float = 1.0

    def __post_init__(self) -> None:
        if self.near_weight < 0:
            raise ValueError("near_weight must be non-negative")
        if not self.near_radius > 0:
            raise ValueError("near_radius must be positive")


@dataclass
class GateTargetAssignment:
    """Per-step target gate (global index over all laps) and front/behind flags.

    ``in_front[k]`` records whether state ``k`` was on the approach side of
    its own target gate.
    """

    targets: NDArray[np.int64]
    in_front: NDArray[np.bool_]
    finish_index: int | None = None

    def shifted(self, steps: float = 1.0) -> "GateTargetAssignment":
        """Realign to a horizon that starts ``steps`` horizon steps later.

        Entry k of the result is entry ``floor(k + steps)`` of this one, with
        the last entry repeated past the end. ``steps=1`` drops the first entry.
        Fractional values arise when the control period differs from the
        horizon step.
        """
        K = len(self.targets)
        idx = np.minimum(np.floor(np.arange(K) + steps + 1e-9).astype(np.int64), K - 1)
        idx = np.maximum(idx, 0)
        return GateTargetAssignment(self.targets[idx].copy(), self.in_front[idx].copy())

    def crossing_index(self) -> int | None:
        """First step assigned past the initial target, if any."""
        idx = np.nonzero(self.targets > self.targets[0])[0]
        return int(idx[0]) if len(idx) else None


# --------------------------------------------------------------------------
# Kernels


@numba.njit(cache=True)
def _state_error_sq(x, ref, w):
    total = 0.0
    for i in range(3):
        total += w[i] * (x[i] - ref[i]) ** 2
        total += w[3 + i] * (x[3 + i] - ref[3 + i]) ** 2
        total += w[9 + i] * (x[10 + i] - ref[10 + i]) ** 2
    # attitude error: vector part of conj(q_ref) * q
    aw, ax, ay, az = ref[6], ref[7], ref[8], ref[9]
    bw, bx, by, bz = x[6], x[7], x[8], x[9]
    ex = aw * bx - bw * ax - (ay * bz - az * by)
    ey = aw * by - bw * ay - (az * bx - ax * bz)
    ez = aw * bz - bw * az - (ax * by - ay * bx)
    total += w[6] * ex * ex + w[7] * ey * ey + w[8] * ez * ez
    return total


@numba.njit(cache=True)
def _tracking_cost(X, U, ref, q, r, qk):
    K = U.shape[0]
    total = 0.0
    for k in range(K):
        total += _state_error_sq(X[k], ref[k], q)
        for i in range(NU):
            total += r[i] * U[k, i] ** 2
    total += _state_error_sq(X[K], ref[K], qk)
    return total


@numba.njit(cache=True)
def _lag_contour(p, theta, h, coef):
    c, t = _path_eval(theta, h, coef)
    r = p - c
    lag = r[0] * t[0] + r[1] * t[1] + r[2] * t[2]
    el = lag * t
    return el, r - el


@numba.njit(cache=True)
def _contouring_cost(X, U, h, coef, w):
    K = U.shape[0]
    total = 0.0
    for k in range(K):
        el, ec = _lag_contour(X[k, 0:3], X[k, THETA], h, coef)
        total += w[0] * (el[0] ** 2 + el[1] ** 2 + el[2] ** 2)
        total += w[1] * (ec[0] ** 2 + ec[1] ** 2 + ec[2] ** 2)
        for i in range(3):
            total += w[2 + i] * X[k, 10 + i] ** 2
        total += w[5] * U[k, 4] ** 2
        for i in range(4):
            total += w[6 + i] * (X[k + 1, 13 + i] - X[k, 13 + i]) ** 2
        total -= w[10] * X[k, THETA_RATE]
    return total


@numba.njit(cache=True)
def _rollout_progress(x0, U, dt, prm, rate_max, X):
    n = _rollout(x0, U, dt, prm, X)
    X[0, THETA] = x0[THETA]
    X[0, THETA_RATE] = x0[THETA_RATE]
    for k in range(U.shape[0]):
        X[k + 1, THETA], X[k + 1, THETA_RATE] = _progress(X[k, THETA], X[k, THETA_RATE], U[k, 4], dt, rate_max)
    return n


@numba.njit(cache=True)
def _approach(p, c, n):
    """Signed distance to the gate plane, positive on the approach side."""
    return (c[0] - p[0]) * n[0] + (c[1] - p[1]) * n[1] + (c[2] - p[2]) * n[2]


@numba.njit(cache=True)
def _crosses(a, b, c, n, half):
    """True if segment a->b passes from the front of the gate to behind it inside the aperture."""
    sa = _approach(a, c, n)
    sb = _approach(b, c, n)
    if not (sa >= 0.0 and sb < 0.0):
        return False
    f = sa / (sa - sb)
    rx = a[0] + f * (b[0] - a[0]) - c[0]
    ry = a[1] + f * (b[1] - a[1]) - c[1]
    rz = a[2] + f * (b[2] - a[2]) - c[2]
    # square aperture axes: horizontal = n x z_up (or y if n is vertical), vertical = horizontal x n
    hx, hy, hz = n[1], -n[0], 0.0
    nh = math.sqrt(hx * hx + hy * hy)
    if nh < 1e-9:
        hx, hy, hz = 0.0, 1.0, 0.0
    else:
        hx /= nh
        hy /= nh
    vx = hy * n[2] - hz * n[1]
    vy = hz * n[0] - hx * n[2]
    vz = hx * n[1] - hy * n[0]
    return abs(rx * hx + ry * hy + rz * hz) <= half and abs(rx * vx + ry * vy + rz * vz) <= half


@numba.njit(cache=True)
def _assign(P, g0, centers, normals, extents, prev_t, prev_f, temporal, targets, front):
    """Fill per-step gate targets for positions ``P[0..K]`` (only K steps are assigned).

    Step k leaves gate g when segment (k-1, k) crosses it and, with
    ``temporal`` set, the previous plan's state k-1 still targeted g from its
    approach side (or had not reached g yet).
    """
    K = targets.shape[0]
    last = centers.shape[0] - 1
    have_prev = prev_t.shape[0] == K
    g = g0
    finish = K
    for k in range(K):
        if k > 0 and g <= last and _crosses(P[k - 1], P[k], centers[g], normals[g], extents[g]):
            ok = True
            if temporal and have_prev:
                pt = prev_t[k - 1]
                if pt > g or (pt == g and not prev_f[k - 1]):
                    ok = False
            if ok:
                g += 1
                if g > last:
                    finish = k
        gi = min(g, last)
        targets[k] = gi
        front[k] = _approach(P[k], centers[gi], normals[gi]) >= 0.0
    return finish


@numba.njit(cache=True)
def _gate_cost(P, targets, g0, centers, q_near, r_near, finish, exit_point):
    """Progress plus near-gate cost; from step ``finish`` on progress is measured to ``exit_point``."""
    K = targets.shape[0]
    total = 0.0
    r2 = r_near * r_near
    for k in range(K):
        c = exit_point if k >= finish else centers[targets[k]]
        d1 = 0.0
        d0 = 0.0
        for i in range(3):
            d1 += (P[k + 1, i] - c[i]) ** 2
            d0 += (P[k, i] - c[i]) ** 2
        total += d1 - d0
        if q_near > 0.0:
            near = r2 if k >= finish else d0
            g = targets[k] + 1 if k >= finish else targets[k]
            if g > g0:
                cp = centers[g - 1]
                dp = (P[k, 0] - cp[0]) ** 2 + (P[k, 1] - cp[1]) ** 2 + (P[k, 2] - cp[2]) ** 2
                if dp < r2:
                    near = dp
            if near < r2:
                total += q_near * near
    return total


@numba.njit(cache=True)
def _finish(X, n, lim):
    """Add the rate penalty, or return the divergence cost for a short rollout."""
    if n < X.shape[0]:
        return lim[3], False
    return lim[0] * _rate_excess(X, lim[1], lim[2]), True


@numba.njit(parallel=True, cache=True)
def _batch_tracking(x0, U, dt, prm, lim, ref, q, r, qk):
    M, K = U.shape[0], U.shape[1]
    out = np.empty(M)
    for m in prange(M):
        X = np.empty((K + 1, NX))
        n = _rollout(x0, U[m], dt, prm, X)
        pen, ok = _finish(X, n, lim)
        out[m] = pen + _tracking_cost(X, U[m], ref, q, r, qk) if ok else pen
    return out


@numba.njit(parallel=True, cache=True)
def _batch_contouring(x0, U, dt, prm, lim, h, coef, w):
    M, K = U.shape[0], U.shape[1]
    out = np.empty(M)
    for m in prange(M):
        X = np.empty((K + 1, NX + 2))
        n = _rollout_progress(x0, U[m], dt, prm, w[11], X)
        pen, ok = _finish(X, n, lim)
        out[m] = pen + _contouring_cost(X, U[m], h, coef, w) if ok else pen
    return out


@numba.njit(parallel=True, cache=True)
def _batch_gate(x0, U, dt, prm, lim, g0, centers, normals, extents, prev_t, prev_f, temporal, q_near, r_near, exit_point):
    M, K = U.shape[0], U.shape[1]
    out = np.empty(M)
    for m in prange(M):
        X = np.empty((K + 1, NX))
        n = _rollout(x0, U[m], dt, prm, X)
        pen, ok = _finish(X, n, lim)
        if ok:
            tg = np.empty(K, dtype=np.int64)
            fr = np.empty(K, dtype=np.bool_)
            finish = _assign(X[:, 0:3], g0, centers, normals, extents, prev_t, prev_f, temporal, tg, fr)
            out[m] = pen + _gate_cost(X[:, 0:3], tg, g0, centers, q_near, r_near, finish, exit_point)
        else:
            out[m] = pen
    return out


# --------------------------------------------------------------------------
# Public cost functions


def _positions(X) -> NDArray[np.float64]:
    X = np.asarray(X, dtype=np.float64)
    return np.ascontiguousarray(X[:, 0:3]) if X.ndim == 2 and X.shape[1] >= 3 else X.reshape(-1, 3)


def tracking_cost(X, U, ref: ReferenceTrajectory, t0: float, w: TrackingWeights, dt: float = 0.03) -> float:
    X = np.ascontiguousarray(X, dtype=np.float64)
    U = np.ascontiguousarray(U, dtype=np.float64)
    K = U.shape[0]
    if len(ref.times) == 0:
        raise ValueError("empty reference")
    refs = sample_reference(ref, t0 + dt * np.arange(K + 1))
    return float(_tracking_cost(X, U, _ref_rows(refs), w.state, w.inputs, w.terminal))


def _ref_rows(refs: NDArray[np.float64]) -> NDArray[np.float64]:
    """Lay 13-column reference rows out on the 17-entry state indexing."""
    out = np.zeros((len(refs), NX))
    out[:, :13] = refs
    return out


def lag_contour_errors(p, theta: float, path: ArcPath) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    if theta < 0 or theta > path.length:
        warnings.warn(f"progress {theta:.3f} outside path [0, {path.length:.3f}]; clamped", stacklevel=2)
    return _lag_contour(np.asarray(p, dtype=np.float64), float(theta), path.spacing, path.coef)


def contouring_cost(X, U, path: ArcPath, w: ContouringWeights) -> float:
    X = np.ascontiguousarray(X, dtype=np.float64)
    U = np.ascontiguousarray(U, dtype=np.float64)
    return float(_contouring_cost(X, U, path.spacing, path.coef, w.as_array()))


def assign_gate_targets(
    X,
    track: Track,
    prev: GateTargetAssignment | None = None,
    gate_index: int = 0,
    temporal: bool = True,
) -> GateTargetAssignment:
    """Target gate for each of the first ``len(X) - 1`` states of a trajectory.

    ``prev`` must already be aligned to this horizon (see
    :meth:`GateTargetAssignment.shifted`). With ``temporal=False`` only the
    geometric crossing test is applied.
    """
    P = _positions(X)
    K = len(P) - 1
    centers, normals, extents = track.gate_arrays()
    targets = np.empty(K, dtype=np.int64)
    front = np.empty(K, dtype=np.bool_)
    pt, pf = _prev_arrays(prev, K)
    finish = _assign(P, int(gate_index), centers, normals, extents, pt, pf, temporal, targets, front)
    return GateTargetAssignment(targets, front, finish if finish < K else None)


def _prev_arrays(prev: GateTargetAssignment | None, K: int):
    if prev is None:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.bool_)
    if len(prev.targets) != K:
        raise ValueError(f"previous assignment has {len(prev.targets)} steps, horizon has {K}")
    return np.asarray(prev.targets, dtype=np.int64), np.asarray(prev.in_front, dtype=np.bool_)


def exit_point(track: Track) -> NDArray[np.float64]:
    """Point beyond the final gate that progress is measured to once every gate is passed.

    It lies along the final gate's normal at the spacing of the last two gates,
    so the final crossing pays off like any other.
    """
    centers, normals, _ = track.gate_arrays()
    spacing = float(np.linalg.norm(centers[-1] - centers[-2])) if len(centers) > 1 else 5.0
    return centers[-1] + normals[-1] * max(spacing, 1.0)


def gate_progress_cost(X, assignment: GateTargetAssignment, track: Track, w: GateProgressWeights) -> float:
    P = _positions(X)
    if len(assignment.targets) != len(P) - 1:
        raise ValueError("assignment length must match the horizon")
    centers = track.gate_arrays()[0]
    targets = np.asarray(assignment.targets, dtype=np.int64)
    finish = len(targets) if assignment.finish_index is None else assignment.finish_index
    return float(_gate_cost(P, targets, int(targets[0]), centers, w.near_weight, w.near_radius, finish, exit_point(track)))


# --------------------------------------------------------------------------
# Objective handles consumed by the controller


class Objective:
    """Interface between a cost function and the sampling controller.

    Per control step the controller calls :meth:`begin` with the measured
    vehicle state, then :meth:`batch_costs` on the sampled sequences, then
    :meth:`commit` with the updated sequence.
    """

    name = "objective"
    nu = NU
    nx = NX

    def reset(self) -> None:
        pass

    def extra_bounds(self) -> tuple[list[float], list[float]]:
        return [], []

    def begin(self, x: NDArray[np.float64], t: float, gate_index: int = 0) -> NDArray[np.float64]:
        return np.asarray(x, dtype=np.float64)

    def propagate(self, x0, U, prm, dt) -> tuple[NDArray[np.float64], int]:
        X = np.empty((U.shape[0] + 1, NX))
        return X, _rollout(x0, U, dt, prm, X)

    def batch_costs(self, x0, U, dt, prm, limits) -> NDArray[np.float64]:
        raise NotImplementedError

    def trajectory_cost(self, X, U) -> float:
        raise NotImplementedError

    def commit(self, x0, U, prm, dt) -> None:
        pass


class TrackingObjective(Objective):
    name = "tracking"

    def __init__(self, reference: ReferenceTrajectory, weights: TrackingWeights | None = None, dt: float = 0.03, horizon: int = 20):
        if reference is None or len(reference.times) == 0:
            raise ValueError("tracking objective needs a reference trajectory")
        self.reference = reference
        self.weights = weights or TrackingWeights()
        self.dt = dt
        self.horizon = horizon
        self._ref = None

    def begin(self, x, t, gate_index=0):
        self._ref = _ref_rows(sample_reference(self.reference, t + self.dt * np.arange(self.horizon + 1)))
        return np.asarray(x, dtype=np.float64)

    def batch_costs(self, x0, U, dt, prm, limits):
        w = self.weights
        return _batch_tracking(x0, U, dt, prm, limits, self._ref, w.state, w.inputs, w.terminal)

    def trajectory_cost(self, X, U):
        w = self.weights
        return float(_tracking_cost(np.ascontiguousarray(X[:, :NX]), U, self._ref, w.state, w.inputs, w.terminal))


class ContouringObjective(Objective):
    """Path following with a progress state appended to the vehicle state.

    At each step the progress is re-anchored to the closest path point near
    the previous anchor and its rate to the velocity along the tangent.
    """

    name = "contouring"
    nu = NU + 1
    nx = NX_PROGRESS

    def __init__(self, path: ArcPath, weights: ContouringWeights | None = None, progress_accel_bounds=(-20.0, 20.0), window: float = 2.0):
        if path is None:
            raise ValueError("contouring objective needs a path")
        self.path = path
        self.weights = weights or ContouringWeights()
        self.bounds = tuple(float(b) for b in progress_accel_bounds)
        self.window = window
        self._w = self.weights.as_array()
        self.theta = 0.0

    def reset(self):
        self.theta = 0.0

    def extra_bounds(self):
        return [self.bounds[0]], [self.bounds[1]]

    def begin(self, x, t, gate_index=0):
        x = np.asarray(x, dtype=np.float64)
        self.theta = _project(x[0:3], self.theta, self.window, self.path.spacing, self.path.coef, self.path.length)
        tangent = _path_eval(self.theta, self.path.spacing, self.path.coef)[1]
        rate = min(max(float(np.dot(x[3:6], tangent)), 0.0), self.weights.max_progress_rate)
        return np.concatenate([x[:NX], [self.theta, rate]])

    def propagate(self, x0, U, prm, dt):
        X = np.empty((U.shape[0] + 1, NX_PROGRESS))
        return X, _rollout_progress(x0, U, dt, prm, self.weights.max_progress_rate, X)

    def batch_costs(self, x0, U, dt, prm, limits):
        return _batch_contouring(x0, U, dt, prm, limits, self.path.spacing, self.path.coef, self._w)

    def trajectory_cost(self, X, U):
        return float(_contouring_cost(np.ascontiguousarray(X), U, self.path.spacing, self.path.coef, self._w))


@numba.njit(cache=True)
def _project(p, guess, window, h, coef, length):
    lo = max(0.0, guess - window)
    hi = min(length, guess + window)
    n = max(2, int((hi - lo) / 0.01) + 1)
    best, best_d = lo, np.inf
    for i in range(n):
        th = lo + (hi - lo) * i / (n - 1)
        c, _ = _path_eval(th, h, coef)
        d = (c[0] - p[0]) ** 2 + (c[1] - p[1]) ** 2 + (c[2] - p[2]) ** 2
        if d < best_d:
            best, best_d = th, d
    return best


class GateProgressObjective(Objective):
    """Reference-free progress towards the sequence of gates.

    The assignment computed on the committed plan is kept and realigned each
    control step; it gates which crossings the samples may register.
    """

    name = "gate_progress"

    def __init__(self, track: Track, weights: GateProgressWeights | None = None, temporal: bool = True):
        self.track = track
        self.weights = weights or GateProgressWeights()
        self.temporal = temporal
        self.centers, self.normals, self.extents = track.gate_arrays()
        self.exit_point = exit_point(track)
        self.prev: GateTargetAssignment | None = None
        self.gate_index = 0
        self._aligned: GateTargetAssignment | None = None
        self._prev_time: float | None = None
        self._prev_dt = 0.0
        self._time = 0.0

    def reset(self):
        self.prev = None
        self.gate_index = 0
        self._aligned = None
        self._prev_time = None

    def begin(self, x, t, gate_index=0):
        self.gate_index = int(gate_index)
        self._time = float(t)
        self._aligned = None
        if self.prev is not None:
            # Align by elapsed wall-clock time; fall back to one step when time is not supplied.
            elapsed = self._time - self._prev_time if self._prev_time is not None else 0.0
            steps = elapsed / self._prev_dt if elapsed > 0 and self._prev_dt > 0 else 1.0
            self._aligned = self.prev.shifted(steps)
        return np.asarray(x, dtype=np.float64)

    def _prev_arrays(self, K):
        return _prev_arrays(self._aligned, K)

    def batch_costs(self, x0, U, dt, prm, limits):
        pt, pf = self._prev_arrays(U.shape[1])
        w = self.weights
        return _batch_gate(
            x0, U, dt, prm, limits, self.gate_index, self.centers, self.normals, self.extents,
            pt, pf, self.temporal, w.near_weight, w.near_radius, self.exit_point,
        )

    def assignment_for(self, X) -> GateTargetAssignment:
        P = _positions(X)
        K = len(P) - 1
        targets = np.empty(K, dtype=np.int64)
        front = np.empty(K, dtype=np.bool_)
        pt, pf = self._prev_arrays(K)
        finish = _assign(P, self.gate_index, self.centers, self.normals, self.extents, pt, pf, self.temporal, targets, front)
        return GateTargetAssignment(targets, front, finish if finish < K else None)

    def trajectory_cost(self, X, U):
        a = self.assignment_for(X)
        finish = len(a.targets) if a.finish_index is None else a.finish_index
        w = self.weights
        return float(_gate_cost(_positions(X), a.targets, self.gate_index, self.centers, w.near_weight, w.near_radius, finish, self.exit_point))

    def commit(self, x0, U, prm, dt):
        X, n = self.propagate(x0, U, prm, dt)
        if n == len(X):
            self.prev = self.assignment_for(X)
            self._prev_time, self._prev_dt = self._time, float(dt)
        else:
            self.prev = None
            self._prev_time = None


OBJECTIVES = ("tracking", "contouring", "gate_progress")
