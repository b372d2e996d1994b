"""Constructed trajectories for gate-switching and contouring checks."""

from __future__ import annotations

import numpy as np

from racer.track import Gate, Track


def gate_track(center=(0.0, 0.0, 1.5), normal=(1.0, 0.0, 0.0), half=0.75, extra_gates=1) -> Track:
    """One gate of interest followed by ``extra_gates`` further along its normal."""
    c = np.asarray(center, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    gates = [Gate(c, n, half)] + [Gate(c + n * 5.0 * (i + 1), n, half) for i in range(extra_gates)]
    return Track(tuple(gates), 1, c - 5 * n, 0.0, "fixture")


def straddling_path(rng, track: Track, K: int = 20, speed=None, offset=None, bend=None):
    """Positions ``P[0..K]`` that cross gate 0 inside its aperture.

    Returns the positions and the arrival time (in steps, fractional) at the
    gate plane; the path is a straight line plus a small lateral bend.
    """
    g = track.gates[0]
    n = g.normal
    side = np.cross(n, [0.0, 0.0, 1.0])
    side = side / np.linalg.norm(side) if np.linalg.norm(side) > 1e-9 else np.array([0.0, 1.0, 0.0])
    up = np.cross(side, n)
    speed = rng.uniform(0.2, 0.6) if speed is None else speed
    offset = rng.uniform(-0.5, 0.5, 2) if offset is None else np.asarray(offset)
    bend = rng.uniform(-0.01, 0.01) if bend is None else bend
    arrival = rng.uniform(2.3, K - 3.3)
    k = np.arange(K + 1, dtype=np.float64)
    along = (k - arrival) * speed
    lateral = offset[0] + bend * (k - arrival) ** 2
    P = g.center + np.outer(along, n) + np.outer(lateral, side) + np.outer(np.full(K + 1, offset[1]), up)
    return P, arrival


def advance(P: np.ndarray) -> np.ndarray:
    """Same geometric path one step later: drop the first point, extrapolate the last."""
    return np.vstack([P[1:], 2 * P[-1] - P[-2]])


def with_arrival(track: Track, arrival: float, K: int = 20, speed: float = 0.4, offset=(0.1, 0.0)) -> np.ndarray:
    """Straight path through gate 0 reaching the plane at fractional step ``arrival``."""
    g = track.gates[0]
    k = np.arange(K + 1, dtype=np.float64)
    side = np.cross(g.normal, [0.0, 0.0, 1.0])
    side = side / np.linalg.norm(side)
    return g.center + np.outer((k - arrival) * speed, g.normal) + np.outer(np.full(K + 1, offset[0]), side)
