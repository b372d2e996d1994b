"""Quadrotor rigid-body dynamics with per-rotor thrust states.

The state is carried as a flat float64 vector so the same jitted kernels
serve single-vehicle simulation and batched rollouts::

    [px py pz | vx vy vz | qw qx qy qz | wx wy wz | T1 T2 T3 T4]

Quaternions are Hamilton, scalar first, mapping body to world. The control
input is the per-rotor thrust derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.typing import NDArray

POS = slice(0, 3)
VEL = slice(3, 6)
QUAT = slice(6, 10)
RATE = slice(10, 13)
THRUST = slice(13, 17)
NX = 17
NU = 4

# Flat parameter vector layout consumed by the kernels.
P_MASS, P_G, P_J, P_ARM, P_CTAU, P_DRAG, P_TMIN, P_TMAX = 0, 1, 4, 7, 8, 9, 12, 13
NP = 14


class InvalidStateError(ValueError):
    """Raised for non-finite or otherwise malformed state input."""


class ConfigurationError(ValueError):
    """Raised for physically inconsistent vehicle parameters."""


class RolloutDiverged(ArithmeticError):
    """Raised when integration produces a non-finite state."""


@dataclass(frozen=True)
class VehicleParams:
    """Physical constants and actuator limits of the quadrotor.

    Inertia and drag are diagonal and given as 3-vectors.
    """

    mass: float = 0.34
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    inertia: tuple[float, float, float] = (2.5e-3, 2.5e-3, 4.3e-3)
    arm_length: float = 0.15
    torque_coeff: float = 0.013
    drag: tuple[float, float, float] = (0.3, 0.3, 0.15)
    thrust_min: float = 0.0
    thrust_max: float = 10.0
    thrust_rate_min: float = -10.0
    thrust_rate_max: float = 10.0
    rate_min: float = -10.0
    rate_max: float = 10.0

    def __post_init__(self) -> None:
        if not self.mass > 0:
            raise ConfigurationError(f"mass must be positive, got {self.mass}")
        if len(self.inertia) != 3 or min(self.inertia) <= 0:
            raise ConfigurationError(f"inertia must be 3 positive values, got {self.inertia}")
        if len(self.drag) != 3 or min(self.drag) < 0:
            raise ConfigurationError(f"drag entries must be >= 0, got {self.drag}")
        if self.thrust_min < 0 or not self.thrust_max > self.thrust_min:
            raise ConfigurationError(
                f"need 0 <= thrust_min < thrust_max, got [{self.thrust_min}, {self.thrust_max}]"
            )
        if not self.thrust_rate_max > self.thrust_rate_min:
            raise ConfigurationError("thrust_rate_max must exceed thrust_rate_min")
        if not self.rate_max > self.rate_min:
            raise ConfigurationError("rate_max must exceed rate_min")

    @property
    def hover_thrust(self) -> float:
        """Per-rotor thrust that balances gravity."""
        return self.mass * float(np.linalg.norm(self.gravity)) / 4.0

    def as_array(self) -> NDArray[np.float64]:
        a = np.empty(NP)
        a[P_MASS] = self.mass
        a[P_G : P_G + 3] = self.gravity
        a[P_J : P_J + 3] = self.inertia
        a[P_ARM] = self.arm_length
        a[P_CTAU] = self.torque_coeff
        a[P_DRAG : P_DRAG + 3] = self.drag
        a[P_TMIN] = self.thrust_min
        a[P_TMAX] = self.thrust_max
        return a

    @classmethod
    def preset(cls, name: str, **overrides) -> "VehicleParams":
        """Named parameter sets.

        ``sim`` keeps the 10 N per-rotor ceiling of the simulation table,
        ``real`` scales it down to a thrust-to-weight ratio of 3 at 340 g.
        """
        if name == "sim":
            base = cls()
        elif name == "real":
            base = cls(thrust_max=3.0 * 0.34 * 9.81 / 4.0)
        else:
            raise ConfigurationError(f"unknown vehicle preset {name!r}; expected 'sim' or 'real'")
        if not overrides:
            return base
        fields = {**base.__dict__, **overrides}
        for key in ("gravity", "inertia", "drag"):
            fields[key] = tuple(float(x) for x in fields[key])
        return cls(**fields)


@dataclass
class VehicleState:
    position: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    velocity: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    attitude: NDArray[np.float64] = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    body_rates: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    thrusts: NDArray[np.float64] = field(default_factory=lambda: np.zeros(4))

    def to_array(self) -> NDArray[np.float64]:
        return np.concatenate(
            [self.position, self.velocity, self.attitude, self.body_rates, self.thrusts]
        ).astype(np.float64)

    @classmethod
    def from_array(cls, x: NDArray[np.float64]) -> "VehicleState":
        x = np.asarray(x, dtype=np.float64)
        return cls(
            x[POS].copy(), x[VEL].copy(), x[QUAT].copy(), x[RATE].copy(), x[THRUST].copy()
        )

    @classmethod
    def hover(cls, position, params: VehicleParams, yaw: float = 0.0) -> "VehicleState":
        return cls(
            position=np.asarray(position, dtype=np.float64).copy(),
            attitude=yaw_quaternion(yaw),
            thrusts=np.full(4, params.hover_thrust),
        )


@dataclass
class ProgressState:
    """Arc-length progress and its rate for contouring control."""

    theta: float = 0.0
    rate: float = 0.0


def yaw_quaternion(yaw: float) -> NDArray[np.float64]:
    return np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])


@numba.njit(cache=True)
def _rotation(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return R


@numba.njit(cache=True)
def _torque(T, arm, ctau):
    a = arm / math.sqrt(2.0)
    return np.array(
        [
            a * (T[0] + T[1] - T[2] - T[3]),
            a * (-T[0] + T[1] + T[2] - T[3]),
            ctau * (T[0] - T[1] + T[2] - T[3]),
        ]
    )


@numba.njit(cache=True)
def _derivative(x, u, prm, out):
    """Writes dx/dt into ``out``; ``x`` and ``out`` are length-17 vectors."""
    qw, qx, qy, qz = x[6], x[7], x[8], x[9]
    r00 = 1 - 2 * (qy * qy + qz * qz)
    r01 = 2 * (qx * qy - qw * qz)
    r02 = 2 * (qx * qz + qw * qy)
    r10 = 2 * (qx * qy + qw * qz)
    r11 = 1 - 2 * (qx * qx + qz * qz)
    r12 = 2 * (qy * qz - qw * qx)
    r20 = 2 * (qx * qz - qw * qy)
    r21 = 2 * (qy * qz + qw * qx)
    r22 = 1 - 2 * (qx * qx + qy * qy)
    T1, T2, T3, T4 = x[13], x[14], x[15], x[16]
    f = (T1 + T2 + T3 + T4) / prm[P_MASS]
    vx, vy, vz = x[3], x[4], x[5]
    # body-frame velocity scaled by drag
    bx = (r00 * vx + r10 * vy + r20 * vz) * prm[P_DRAG]
    by = (r01 * vx + r11 * vy + r21 * vz) * prm[P_DRAG + 1]
    bz = (r02 * vx + r12 * vy + r22 * vz) * prm[P_DRAG + 2]
    out[0] = vx
    out[1] = vy
    out[2] = vz
    out[3] = prm[P_G] + r02 * f - (r00 * bx + r01 * by + r02 * bz)
    out[4] = prm[P_G + 1] + r12 * f - (r10 * bx + r11 * by + r12 * bz)
    out[5] = prm[P_G + 2] + r22 * f - (r20 * bx + r21 * by + r22 * bz)
    wx, wy, wz = x[10], x[11], x[12]
    out[6] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    out[7] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[8] = 0.5 * (qw * wy - qx * wz + qz * wx)
    out[9] = 0.5 * (qw * wz + qx * wy - qy * wx)
    a = prm[P_ARM] / math.sqrt(2.0)
    tx = a * (T1 + T2 - T3 - T4)
    ty = a * (-T1 + T2 + T3 - T4)
    tz = prm[P_CTAU] * (T1 - T2 + T3 - T4)
    Jx, Jy, Jz = prm[P_J], prm[P_J + 1], prm[P_J + 2]
    out[10] = (tx - (wy * Jz * wz - wz * Jy * wy)) / Jx
    out[11] = (ty - (wz * Jx * wx - wx * Jz * wz)) / Jy
    out[12] = (tz - (wx * Jy * wy - wy * Jx * wx)) / Jz
    for i in range(4):
        out[13 + i] = u[i]


@numba.njit(cache=True)
def _rk4(x, u, dt, prm, out, work):
    """One saturated RK4 step from ``x`` into ``out``; returns False on divergence.

    ``work`` is a (5, 17) scratch buffer owned by the caller.
    """
    k1, k2, k3, k4, tmp = work[0], work[1], work[2], work[3], work[4]
    _derivative(x, u, prm, k1)
    for i in range(NX):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    _derivative(tmp, u, prm, k2)
    for i in range(NX):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    _derivative(tmp, u, prm, k3)
    for i in range(NX):
        tmp[i] = x[i] + dt * k3[i]
    _derivative(tmp, u, prm, k4)
    for i in range(NX):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    n = math.sqrt(out[6] ** 2 + out[7] ** 2 + out[8] ** 2 + out[9] ** 2)
    for i in range(6, 10):
        out[i] /= n
    for i in range(13, 17):
        out[i] = min(max(out[i], prm[P_TMIN]), prm[P_TMAX])
    for i in range(NX):
        if not math.isfinite(out[i]):
            return False
    return True


@numba.njit(cache=True)
def _integrate(x, u, dt, substeps, prm):
    """Holds ``u`` for ``substeps`` RK4 steps of ``dt``; NaN-filled on divergence."""
    a = x.copy()
    b = np.empty(NX)
    work = np.empty((5, NX))
    for _ in range(substeps):
        if not _rk4(a, u, dt, prm, b, work):
            b[:] = np.nan
            return b
        a, b = b, a
    return a


def _as_state_array(x) -> NDArray[np.float64]:
    arr = x.to_array() if isinstance(x, VehicleState) else np.asarray(x, dtype=np.float64)
    if arr.shape != (NX,):
        raise InvalidStateError(f"state vector must have {NX} entries, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidStateError("state contains non-finite values")
    return arr


def rotation_matrix(q) -> NDArray[np.float64]:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise InvalidStateError(f"quaternion must be 4 finite values, got {q!r}")
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise InvalidStateError(f"quaternion is not unit norm (|q| = {np.linalg.norm(q)})")
    return _rotation(q)


def thrust_torque(
    thrusts, params: VehicleParams
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Collective body-frame thrust vector and body torque from rotor thrusts."""
    T = np.asarray(thrusts, dtype=np.float64)
    if T.shape != (4,) or not np.all(np.isfinite(T)):
        raise InvalidStateError(f"expected 4 finite rotor thrusts, got {thrusts!r}")
    return np.array([0.0, 0.0, T.sum()]), _torque(T, params.arm_length, params.torque_coeff)


def dynamics_derivative(x, u, params: VehicleParams) -> NDArray[np.float64]:
    arr = _as_state_array(x)
    out = np.empty(NX)
    _derivative(arr, np.asarray(u, dtype=np.float64)[:NU], params.as_array(), out)
    return out


def step(x, u, dt: float, params: VehicleParams, substeps: int = 1):
    """Advance the vehicle by ``substeps`` RK4 steps of ``dt`` with ``u`` held.

    Accepts either a :class:`VehicleState` or a flat vector and returns the
    same kind. Raises :class:`RolloutDiverged` if the result is non-finite.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    arr = _as_state_array(x)
    out = _integrate(arr, np.asarray(u, dtype=np.float64)[:NU], dt, substeps, params.as_array())
    if not np.all(np.isfinite(out)):
        raise RolloutDiverged("integration produced a non-finite state")
    return VehicleState.from_array(out) if isinstance(x, VehicleState) else out


@numba.njit(cache=True)
def _progress(theta, rate, accel, dt, rate_max):
    rate = min(max(rate + accel * dt, 0.0), rate_max)
    return theta + rate * dt, rate


def step_progress(s: ProgressState, accel: float, dt: float, rate_max: float) -> ProgressState:
    theta, rate = _progress(s.theta, s.rate, accel, dt, rate_max)
    return ProgressState(theta, rate)


@numba.njit(cache=True)
def _rollout(x0, U, dt, prm, X):
    """Fill ``X[0..K]`` (rows of length >= 17) from ``x0`` under ``U``.

    Returns the number of valid rows; fewer than ``K + 1`` means divergence.
    """
    K = U.shape[0]
    work = np.empty((5, NX))
    X[0, :NX] = x0[:NX]
    for k in range(K):
        if not _rk4(X[k, :NX], U[k, :NU], dt, prm, X[k + 1, :NX], work):
            return k + 1
    return K + 1


@numba.njit(cache=True)
def _rate_excess(X, lo, hi):
    """Sum of squared body-rate bound violations over states 1..K."""
    total = 0.0
    for k in range(1, X.shape[0]):
        for i in range(10, 13):
            w = X[k, i]
            if w > hi:
                total += (w - hi) ** 2
            elif w < lo:
                total += (lo - w) ** 2
    return total
