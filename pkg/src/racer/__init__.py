"""Sampling-based model predictive control for quadrotor racing."""

from .dynamics import ProgressState, VehicleParams, VehicleState
from .mppi import MppiConfig, MppiController
from .objectives import (
    ContouringObjective,
    ContouringWeights,
    GateProgressObjective,
    GateProgressWeights,
    TrackingObjective,
    TrackingWeights,
)
from .track import ArcPath, Gate, ReferenceTrajectory, Track

__all__ = [
    "ArcPath",
    "ContouringObjective",
    "ContouringWeights",
    "Gate",
    "GateProgressObjective",
    "GateProgressWeights",
    "MppiConfig",
    "MppiController",
    "ProgressState",
    "ReferenceTrajectory",
    "Track",
    "TrackingObjective",
    "TrackingWeights",
    "VehicleParams",
    "VehicleState",
]
