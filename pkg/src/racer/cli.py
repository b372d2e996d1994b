"""Command-line front end: ``racer run | benchmark | plot | gen-track``.

Exit status is 0 on success, 1 when any race crashed or timed out, and 2
for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import contextlib
import inspect
import logging
import multiprocessing
import os
import sys
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, ExperimentConfig, load_config
from .objectives import OBJECTIVES
from .plot import thrust_svg, trajectory_svg
from .sim import LogFormatError, RaceResult, RunLog, SetupError, run_race
from .track import (
    TRACK_SHAPES,
    TrackFormatError,
    build_arc_path,
    circle_reference_for,
    gate_polyline,
    load_track,
    save_reference,
    save_track,
)

log = logging.getLogger("racer")

EXIT_OK, EXIT_RUN_FAILED, EXIT_USAGE = 0, 1, 2
BENCHMARK_COLUMNS = (
    "objective", "finished", "waypoint_distance_mean", "waypoint_distance_std",
    "flight_time", "flight_time_std", "tracking_rmse", "tracking_rmse_std",
)


class UsageError(Exception):
    """Bad command-line input; reported with exit status 2."""


# --------------------------------------------------------------------------
# Atomic output


@contextlib.contextmanager
def atomic_path(target):
    """Yield a temporary sibling of ``target`` and move it into place on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, target)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_text(target, text: str) -> None:
    with atomic_path(target) as tmp:
        tmp.write_text(text)


def _yaml(data) -> str:
    return yaml.safe_dump(data, sort_keys=False)


# --------------------------------------------------------------------------
# Race jobs


def _worker_count() -> int:
    raw = os.environ.get("RACER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RACER_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("RACER_THREADS must be >= 1")
    return n


def _race(cfg: ExperimentConfig, objective: str, seed: int, run_dir: Path, threads: int | None = None) -> dict:
    if threads is not None:
        import numba

        numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))
    result = run_race(cfg.track, cfg.spec(objective), cfg.mppi, cfg.sim, seed, cfg.vehicle)
    _write_run(result, cfg, objective, seed, run_dir)
    return {"objective": objective, "seed": seed, **result.summary()}


def _write_run(result: RaceResult, cfg: ExperimentConfig, objective: str, seed: int, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    with atomic_path(run_dir / "log.csv") as tmp:
        result.log.write_csv(tmp)
    write_text(run_dir / "summary.yaml", _yaml({"objective": objective, "seed": seed, **result.summary()}))
    write_text(run_dir / "trajectory.svg", trajectory_svg([result.log], [objective], cfg.track))
    write_text(run_dir / "thrust.svg", thrust_svg([result.log], [objective], 4 * cfg.vehicle.thrust_max))


def _quiet_numba() -> None:
    # numba warns once per process when it falls back from the TBB threading layer
    warnings.filterwarnings("ignore", module="numba")


def _dispatch(jobs: list[tuple[ExperimentConfig, str, int, Path]]) -> list[dict]:
    """Run jobs serially or on a process pool; results keep job order."""
    workers = min(_worker_count(), len(jobs))
    if workers <= 1:
        return [_race(*job) for job in jobs]
    cores = os.cpu_count() or 1
    per = max(1, cores // workers)
    # spawn: OpenMP thread pools do not survive fork
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_quiet_numba) as pool:
        futures = [pool.submit(_race, *job, per) for job in jobs]
        return [f.result() for f in futures]


def _mean_std(values) -> tuple[float | None, float | None]:
    v = [x for x in values if x is not None]
    if not v:
        return None, None
    a = np.asarray(v, dtype=np.float64)
    return float(a.mean()), float(a.std())


def _aggregate(summaries: list[dict]) -> dict:
    wd = [d for s in summaries for d in s["waypoint_distances"]]
    ft = _mean_std([s["flight_time"] for s in summaries if s["outcome"] == "finished"])
    rmse = _mean_std([s["tracking_rmse"][0] if s["tracking_rmse"] else None for s in summaries])
    w = _mean_std(wd)
    return {
        "runs": len(summaries),
        "finished": sum(s["outcome"] == "finished" for s in summaries),
        "outcomes": [s["outcome"] for s in summaries],
        "waypoint_distance": {"mean": w[0], "std": w[1]},
        "flight_time": {"mean": ft[0], "std": ft[1]},
        "tracking_rmse": {"mean": rmse[0], "std": rmse[1]},
    }


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if len(cfg.objectives) != 1:
        raise ConfigError("key 'objectives': `run` takes exactly one objective; use `benchmark` for several")
    objective = cfg.objectives[0]
    jobs = [(cfg, objective, seed, cfg.output / f"run-{i}") for i, seed in enumerate(cfg.seeds)]
    summaries = _dispatch(jobs)
    if len(summaries) > 1:
        write_text(cfg.output / "aggregate.yaml", _yaml({"objective": objective, "seeds": cfg.seeds, **_aggregate(summaries)}))
    for i, s in enumerate(summaries):
        print(f"run-{i} seed={s['seed']} {s['outcome']} flight_time={s['flight_time']:.3f}s gates={s['gates_passed']}")
    return EXIT_OK if all(s["outcome"] == "finished" for s in summaries) else EXIT_RUN_FAILED


def _cell(v: float | None) -> str:
    return "" if v is None else f"{v:.4f}"


def benchmark_table(rows: list[dict]) -> str:
    lines = [",".join(BENCHMARK_COLUMNS)]
    for r in rows:
        agg = r["aggregate"]
        lines.append(",".join([
            r["objective"],
            f"{agg['finished']}/{agg['runs']}",
            _cell(agg["waypoint_distance"]["mean"]),
            _cell(agg["waypoint_distance"]["std"]),
            _cell(agg["flight_time"]["mean"]),
            _cell(agg["flight_time"]["std"]),
            _cell(agg["tracking_rmse"]["mean"]),
            _cell(agg["tracking_rmse"]["std"]),
        ]))
    return "\n".join(lines) + "\n"


def cmd_benchmark(args) -> int:
    cfg = load_config(args.config)
    jobs = [
        (cfg, obj, seed, cfg.output / obj / f"run-{i}")
        for obj in cfg.objectives
        for i, seed in enumerate(cfg.seeds)
    ]
    summaries = _dispatch(jobs)
    rows = []
    for obj in cfg.objectives:
        mine = [s for s in summaries if s["objective"] == obj]
        rows.append({"objective": obj, "aggregate": _aggregate(mine)})
    table = benchmark_table(rows)
    write_text(cfg.output / "benchmark.csv", table)
    sys.stdout.write(table)
    ok = all(s["outcome"] == "finished" for s in summaries)
    return EXIT_OK if ok else EXIT_RUN_FAILED


# --------------------------------------------------------------------------
# Plotting


def _label(path: Path) -> str:
    for part in reversed(path.parts[:-1]):
        if part in OBJECTIVES:
            return part
    return path.parent.name or path.stem


def cmd_plot(args) -> int:
    paths = [Path(p) for p in args.logs]
    logs = []
    for p in paths:
        if not p.exists():
            raise UsageError(f"log file {str(p)!r} does not exist")
        try:
            logs.append(RunLog.read_csv(p))
        except LogFormatError as exc:
            raise UsageError(str(exc)) from exc
    labels = args.labels.split(",") if args.labels else [_label(p) for p in paths]
    if len(labels) != len(logs):
        raise UsageError(f"--labels lists {len(labels)} names for {len(logs)} logs")
    track = None
    if args.track:
        try:
            track = load_track(args.track)
        except (OSError, TrackFormatError) as exc:
            raise UsageError(f"--track: {exc}") from exc
    from .dynamics import VehicleParams

    limit = args.thrust_max if args.thrust_max else 4 * VehicleParams.preset(args.preset).thrust_max
    out = Path(args.out)
    write_text(out / "trajectory.svg", trajectory_svg(logs, labels, track))
    write_text(out / "thrust.svg", thrust_svg(logs, labels, limit))
    print(f"wrote {out / 'trajectory.svg'} and {out / 'thrust.svg'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Track generation


def _shape_params(tokens: list[str]) -> dict[str, str]:
    """Accept ``--radius 5``, ``--radius=5`` and ``radius=5`` forms."""
    params: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok.startswith("--"):
            key = tok[2:]
            if "=" in key:
                key, value = key.split("=", 1)
            elif i + 1 < len(tokens):
                i += 1
                value = tokens[i]
            else:
                raise UsageError(f"parameter {tok} needs a value")
        elif "=" in tok:
            key, value = tok.split("=", 1)
        else:
            raise UsageError(f"cannot parse parameter {tok!r}; use --name value or name=value")
        params[key.replace("-", "_")] = value
        i += 1
    return params


def _coerce(fn, params: dict[str, str]) -> dict:
    sig = inspect.signature(fn)
    out = {}
    for key, raw in params.items():
        if key not in sig.parameters:
            valid = ", ".join(sig.parameters)
            raise UsageError(f"unknown parameter {key!r} for this shape; valid: {valid}")
        default = sig.parameters[key].default
        try:
            out[key] = int(raw) if isinstance(default, int) else float(raw)
        except ValueError:
            raise UsageError(f"parameter {key!r} expects a number, got {raw!r}") from None
    return out


def cmd_gen_track(args) -> int:
    if args.shape not in TRACK_SHAPES:
        raise UsageError(f"unknown shape {args.shape!r}; valid shapes: {', '.join(sorted(TRACK_SHAPES))}")
    fn = TRACK_SHAPES[args.shape]
    track = fn(**_coerce(fn, _shape_params(args.params)))
    out = Path(args.out) if args.out else Path(os.environ.get("RACER_OUT", ".")) / f"{args.shape}.yaml"
    with atomic_path(out) as tmp:
        save_track(track, tmp)
    print(f"wrote {out} ({len(track.gates)} gates, {track.laps} laps)")
    if args.reference_speed is not None:
        if args.shape != "circle":
            raise UsageError("--reference-speed is only available for the circle shape")
        ref = circle_reference_for(track, args.reference_speed, ramp=args.reference_ramp)
        ref_out = out.with_name(out.stem + "_reference.csv")
        with atomic_path(ref_out) as tmp:
            save_reference(ref, tmp)
        print(f"wrote {ref_out} ({ref.duration:.2f} s at {args.reference_speed:g} m/s)")
    if args.with_path:
        path = build_arc_path(gate_polyline(track))
        path_out = out.with_name(out.stem + "_path.csv")
        with atomic_path(path_out) as tmp:
            path.save(tmp)
        print(f"wrote {path_out} ({path.length:.2f} m)")
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="racer", description="Sampling-based predictive control for simulated drone racing.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="race one objective for every configured seed")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("benchmark", help="race every configured objective and write a comparison table")
    b.add_argument("config")
    b.set_defaults(func=cmd_benchmark)

    pl = sub.add_parser("plot", help="trajectory and thrust SVGs from run logs")
    pl.add_argument("logs", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--track", help="track file for gate markers")
    pl.add_argument("--labels", help="comma-separated legend names (default: objective from the log path)")
    pl.add_argument("--preset", default="real", choices=("real", "sim"), help="vehicle preset for the saturation line")
    pl.add_argument("--thrust-max", type=float, help="collective thrust limit in N (overrides --preset)")
    pl.set_defaults(func=cmd_plot)

    g = sub.add_parser("gen-track", help="write a fixture track file")
    g.add_argument("shape", help=f"one of {', '.join(sorted(TRACK_SHAPES))}")
    g.add_argument("params", nargs=argparse.REMAINDER, help="shape parameters as --name value or name=value")
    g.set_defaults(func=cmd_gen_track)
    return p


def _split_gen_track_options(argv: list[str]) -> tuple[list[str], dict]:
    """Pull the fixed gen-track options out before the free-form shape parameters."""
    opts = {"out": None, "reference_speed": None, "reference_ramp": 1.0, "with_path": False}
    rest = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        name = tok.split("=", 1)[0]
        if name in ("--out", "--reference-speed", "--reference-ramp"):
            if "=" in tok:
                value = tok.split("=", 1)[1]
            elif i + 1 < len(argv):
                i += 1
                value = argv[i]
            else:
                raise UsageError(f"{name} needs a value")
            key = name[2:].replace("-", "_")
            try:
                opts[key] = value if key == "out" else float(value)
            except ValueError:
                raise UsageError(f"{name} expects a number, got {value!r}") from None
        elif tok == "--with-path":
            opts["with_path"] = True
        else:
            rest.append(tok)
        i += 1
    return rest, opts


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        extra = {}
        if "gen-track" in argv:
            k = argv.index("gen-track")
            tail, extra = _split_gen_track_options(argv[k + 1:])
            argv = argv[: k + 1] + tail
        args = build_parser().parse_args(argv)
        for k, v in extra.items():
            setattr(args, k, v)
        _quiet_numba()
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError, SetupError) as exc:
        print(f"racer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
