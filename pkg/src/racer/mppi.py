"""Model predictive path integral optimisation loop.

Sampling, weighting and update are objective-agnostic; all task knowledge
lives in the :class:`~racer.objectives.Objective` handle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import prange
from numpy.typing import NDArray

from .dynamics import VehicleParams
from .objectives import Objective

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11)


@dataclass
class MppiConfig:
    samples: int = 8192
    horizon: int = 20
    temperature: float = 0.01
    noise_std: tuple[float, ...] = (2.0, 2.0, 2.0, 2.0, 4.0)
    dt: float = 0.03
    seed: int = 0
    rate_penalty: float = 1e3
    divergence_cost: float = 1e6

    def __post_init__(self) -> None:
        if self.samples < 1 or self.horizon < 1:
            raise ValueError("samples and horizon must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.noise_std = tuple(float(s) for s in self.noise_std)
        if any(s <= 0 for s in self.noise_std):
            raise ValueError("noise standard deviations must be positive")

    def sigma(self, nu: int) -> NDArray[np.float64]:
        s = np.asarray(self.noise_std, dtype=np.float64)
        if len(s) < nu:
            s = np.concatenate([s, np.full(nu - len(s), s[-1])])
        return s[:nu].copy()


@dataclass
class Rollout:
    states: NDArray[np.float64]
    controls: NDArray[np.float64]
    cost: float
    diverged: bool = False


@dataclass
class StepDiagnostics:
    min_cost: float
    mean_cost: float
    ess: float
    diverged_fraction: float
    degenerate: bool = False


# --------------------------------------------------------------------------
# Counter-based sampling: every (seed, step, sample) pair owns a stream.


@numba.njit(cache=True)
def _splitmix(x):
    z = x + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@numba.njit(cache=True)
def _uniform(key, counter):
    # (0, 1]: never zero so the log in Box-Muller is finite
    return (float(_splitmix(key + np.uint64(counter)) >> _S11) + 1.0) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _put(out, m, j, z, nominal, sigma, lo, hi):
    nu = nominal.shape[1]
    k, i = j // nu, j % nu
    v = nominal[k, i]
    if m > 0:
        v += sigma[i] * z
    out[m, k, i] = min(max(v, lo[i]), hi[i])


@numba.njit(parallel=True, cache=True)
def _sample_batch(M, nominal, sigma, lo, hi, seed, step):
    K, nu = nominal.shape
    out = np.empty((M, K, nu))
    base = _splitmix(_splitmix(np.uint64(seed)) ^ np.uint64(step))
    for m in prange(M):
        key = _splitmix(base ^ _splitmix(np.uint64(m)))
        n_draw = K * nu
        c = 0
        for d in range(0, n_draw, 2):
            u1 = _uniform(key, c)
            u2 = _uniform(key, c + 1)
            c += 2
            rad = math.sqrt(-2.0 * math.log(u1))
            z0 = rad * math.cos(2.0 * math.pi * u2)
            z1 = rad * math.sin(2.0 * math.pi * u2)
            _put(out, m, d, z0, nominal, sigma, lo, hi)
            if d + 1 < n_draw:
                _put(out, m, d + 1, z1, nominal, sigma, lo, hi)
    return out


def sample_perturbations(nominal, config: MppiConfig, lo, hi, iteration: int = 0) -> NDArray[np.float64]:
    """Draw ``config.samples`` clamped candidates around ``nominal``; sample 0 is the nominal."""
    nominal = np.ascontiguousarray(nominal, dtype=np.float64)
    nu = nominal.shape[1]
    return _sample_batch(
        config.samples,
        nominal,
        config.sigma(nu),
        np.asarray(lo, dtype=np.float64),
        np.asarray(hi, dtype=np.float64),
        np.uint64(config.seed & 0xFFFFFFFFFFFFFFFF),
        np.uint64(iteration),
    )


def compute_weights(costs, temperature: float) -> NDArray[np.float64]:
    """Softmax of negative costs at the given temperature, min-shifted for stability."""
    J = np.asarray(costs, dtype=np.float64)
    w = np.exp(-(J - J.min()) / temperature)
    return w / w.sum()


@numba.njit(cache=True)
def _weighted_sum(weights, U):
    M, K, nu = U.shape
    out = np.zeros((K, nu))
    for m in range(M):
        wm = weights[m]
        if wm == 0.0:
            continue
        for k in range(K):
            for i in range(nu):
                out[k, i] += wm * U[m, k, i]
    return out


def update_sequence(candidates, weights, lo=None, hi=None) -> NDArray[np.float64]:
    U = np.ascontiguousarray(candidates, dtype=np.float64)
    out = _weighted_sum(np.asarray(weights, dtype=np.float64), U)
    if lo is not None:
        out = np.clip(out, lo, hi)
    return out


def _limits(config: MppiConfig, params: VehicleParams) -> NDArray[np.float64]:
    return np.array([config.rate_penalty, params.rate_min, params.rate_max, config.divergence_cost])


def rollout(x0, U, objective: Objective, params: VehicleParams, config: MppiConfig | None = None) -> Rollout:
    """Propagate one control sequence and price it exactly as the batch kernels do.

    ``objective.begin`` must have been called for the current step.
    """
    from .dynamics import _rate_excess

    config = config or MppiConfig()
    x0 = np.asarray(x0, dtype=np.float64)
    U = np.ascontiguousarray(U, dtype=np.float64)
    X, n = objective.propagate(x0, U, params.as_array(), config.dt)
    if n < len(X):
        return Rollout(X, U, config.divergence_cost, True)
    penalty = config.rate_penalty * _rate_excess(X, params.rate_min, params.rate_max)
    return Rollout(X, U, objective.trajectory_cost(X, U) + penalty)


@dataclass
class MppiController:
    """Receding-horizon sampling controller for one vehicle."""

    objective: Objective
    params: VehicleParams
    config: MppiConfig = field(default_factory=MppiConfig)

    def __post_init__(self) -> None:
        extra_lo, extra_hi = self.objective.extra_bounds()
        self.lo = np.array([self.params.thrust_rate_min] * 4 + list(extra_lo), dtype=np.float64)
        self.hi = np.array([self.params.thrust_rate_max] * 4 + list(extra_hi), dtype=np.float64)
        self._prm = self.params.as_array()
        self._limits = _limits(self.config, self.params)
        self.reset()

    def reset(self) -> None:
        self.nominal = np.zeros((self.config.horizon, self.objective.nu))
        self.iteration = 0
        self.objective.reset()

    def control_step(self, x, t: float = 0.0, gate_index: int = 0):
        """One sample-rollout-weight-update cycle.

        Returns the first input (thrust rates only), the updated nominal
        already shifted for the next cycle, and diagnostics.
        """
        cfg = self.config
        x0 = self.objective.begin(np.asarray(x, dtype=np.float64), t, gate_index)
        U = sample_perturbations(self.nominal, cfg, self.lo, self.hi, self.iteration)
        costs = self.objective.batch_costs(x0, U, cfg.dt, self._prm, self._limits)
        weights = compute_weights(costs, cfg.temperature)
        U_star = update_sequence(U, weights, self.lo, self.hi)
        self.objective.commit(x0, U_star, self._prm, cfg.dt)
        diverged = costs >= cfg.divergence_cost
        diag = StepDiagnostics(
            min_cost=float(costs.min()),
            mean_cost=float(costs.mean()),
            ess=float(1.0 / np.sum(weights**2)),
            diverged_fraction=float(diverged.mean()),
            degenerate=bool(diverged.all()),
        )
        self.last_plan = U_star
        self.nominal = np.concatenate([U_star[1:], U_star[-1:]])
        self.iteration += 1
        return U_star[0].copy(), self.nominal, diag
