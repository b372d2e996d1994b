"""Experiment configuration files.

An experiment is one YAML mapping::

    track: circle.yaml            # required; relative paths resolve against the config file
    objective: gate_progress      # or `objectives: [tracking, contouring, gate_progress]`
    reference: circle_ref.csv     # tracking needs it; contouring uses it if no `path`
    path: circle_path.csv         # optional arc-length path for contouring
    weights:                      # flat for one objective, or keyed by objective name
      gate_progress: {near_weight: 0.0}
    temporal: true                # gate-switch temporal check
    mppi: {samples: 2048, horizon: 20, temperature: 0.1}
    sim: {control_rate: 50, max_time: 30}
    vehicle: {preset: real}       # plus any VehicleParams field as an override
    seeds: [0]
    output: out
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .dynamics import ConfigurationError, VehicleParams
from .mppi import MppiConfig
from .objectives import OBJECTIVES
from .sim import ObjectiveSpec, SimConfig
from .track import ArcPath, ReferenceTrajectory, Track, TrackFormatError, load_path, load_reference, load_track

KNOWN_KEYS = {
    "track", "objective", "objectives", "reference", "path", "weights", "temporal",
    "mppi", "sim", "vehicle", "seeds", "output", "name",
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


@dataclass
class ExperimentConfig:
    track: Track
    objectives: list[str]
    weights: dict[str, dict] = field(default_factory=dict)
    reference: ReferenceTrajectory | None = None
    path: ArcPath | None = None
    temporal: bool = True
    mppi: MppiConfig = field(default_factory=MppiConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    vehicle: VehicleParams = field(default_factory=lambda: VehicleParams.preset("real"))
    seeds: list[int] = field(default_factory=lambda: [0])
    output: Path = Path("out")
    name: str = "experiment"

    def spec(self, objective: str) -> ObjectiveSpec:
        return ObjectiveSpec(objective, dict(self.weights.get(objective, {})), self.reference, self.path, self.temporal)


def _section(data: dict, key: str, cls):
    raw = data.get(key) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"key {key!r} must be a mapping")
    allowed = {f.name for f in fields(cls)}
    for k in raw:
        if k not in allowed:
            raise ConfigError(f"unknown key {key}.{k!r}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"key {key!r}: {exc}") from exc


def _vehicle(data: dict) -> VehicleParams:
    raw = dict(data.get("vehicle") or {})
    if not isinstance(raw, dict):
        raise ConfigError("key 'vehicle' must be a mapping")
    preset = raw.pop("preset", "real")
    allowed = {f.name for f in fields(VehicleParams)}
    for k in raw:
        if k not in allowed:
            raise ConfigError(f"unknown key vehicle.{k!r}")
    try:
        return VehicleParams.preset(preset, **raw)
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise ConfigError(f"key 'vehicle': {exc}") from exc


def _weights(data: dict, objectives: list[str]) -> dict[str, dict]:
    raw = data.get("weights") or {}
    if not isinstance(raw, dict):
        raise ConfigError("key 'weights' must be a mapping")
    if raw and all(k in OBJECTIVES for k in raw):
        out = {}
        for k, v in raw.items():
            if not isinstance(v, dict):
                raise ConfigError(f"key weights.{k!r} must be a mapping")
            out[k] = dict(v)
        return out
    if raw and len(objectives) != 1:
        raise ConfigError("key 'weights' must be keyed by objective name when several objectives are listed")
    return {objectives[0]: dict(raw)} if raw else {}


def _file(base: Path, data: dict, key: str) -> Path | None:
    value = data.get(key)
    if value is None:
        return None
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ConfigError(f"key {key!r}: file {str(p)!r} does not exist")
    return p


def parse_config(data, base: Path | str = ".") -> ExperimentConfig:
    """Validate a loaded mapping and resolve its files against ``base``."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    base = Path(base)
    for k in data:
        if k not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {k!r}")

    if "objectives" in data:
        objectives = data["objectives"]
        if isinstance(objectives, str) or not isinstance(objectives, list) or not objectives:
            raise ConfigError("key 'objectives' must be a non-empty list")
    elif "objective" in data:
        objectives = [data["objective"]]
    else:
        raise ConfigError("missing key 'objective'")
    for o in objectives:
        if o not in OBJECTIVES:
            raise ConfigError(f"key 'objective': unknown objective {o!r}; expected one of {', '.join(OBJECTIVES)}")

    track_file = _file(base, data, "track")
    if track_file is None:
        raise ConfigError("missing key 'track'")
    try:
        track = load_track(track_file)
    except TrackFormatError as exc:
        raise ConfigError(f"key 'track': {exc}") from exc

    ref_file = _file(base, data, "reference")
    path_file = _file(base, data, "path")
    if "tracking" in objectives and ref_file is None:
        raise ConfigError("missing key 'reference' (required by the tracking objective)")
    if "contouring" in objectives and ref_file is None and path_file is None:
        raise ConfigError("missing key 'reference' or 'path' (required by the contouring objective)")
    try:
        reference = load_reference(ref_file) if ref_file else None
        path = load_path(path_file) if path_file else None
    except ValueError as exc:
        raise ConfigError(f"key {'reference' if ref_file else 'path'!r}: {exc}") from exc

    seeds = data.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("key 'seeds' must be a non-empty list of integers")

    mppi = _section(data, "mppi", MppiConfig)
    output = Path(os.environ.get("RACER_OUT") or data.get("output", "out"))
    if not output.is_absolute() and not os.environ.get("RACER_OUT"):
        output = base / output
    return ExperimentConfig(
        track=track,
        objectives=list(objectives),
        weights=_weights(data, objectives),
        reference=reference,
        path=path,
        temporal=bool(data.get("temporal", True)),
        mppi=mppi,
        sim=_section(data, "sim", SimConfig),
        vehicle=_vehicle(data),
        seeds=seeds,
        output=output,
        name=str(data.get("name", track.name)),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {str(path)!r} does not exist") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return parse_config(data, path.parent)
