"""Command-line pipeline: build and validate tables, identify boxes, decide, replay.

Exit codes: 0 a decision was reached (feasible or not), 1 integrity failure,
2 configuration error, 3 I/O error. Every run writes ``manifest.json`` into
``--out`` with input hashes, seed and library versions.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import robot as rm
from . import sim
from . import table as tb
from . import trajopt as to
from .errors import (ConfigError, CorruptFile, DimensionMismatch, LiftFeasError, OutOfRange,
                     SchemaMismatch)

log = logging.getLogger("liftfeas")

EXIT_OK, EXIT_INTEGRITY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
TRAJECTORY_SCHEMA_VERSION = "trajectory/1"


class _Run:
    """Output directory plus the manifest being accumulated for this run."""

    def __init__(self, args):
        self.out = Path(args.out)
        self.manifest = {
            "command": args.command,
            "argv": sys.argv[1:] if args.argv is None else list(args.argv),
            "seed": getattr(args, "seed", None),
            "versions": _versions(),
            "inputs": {},
            "outputs": {},
        }

    def add_input(self, role: str, path: Optional[str], text: Optional[str] = None):
        if text is None:
            text = Path(path).read_text()
        self.manifest["inputs"][role] = {
            "path": None if path is None else str(path),
            "sha256": hashlib.sha256(text.encode()).hexdigest(),
        }

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def wrote(self, name: str):
        self.manifest["outputs"][name] = hashlib.sha256((self.out / name).read_bytes()).hexdigest()

    def finish(self, **extra):
        self.manifest.update(extra)
        p = self.path("manifest.json")
        p.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    import scipy
    return {"liftfeas": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _require(path: Optional[str], what: str):
    if path is not None and not Path(path).is_file():
        raise ConfigError(f"{what} file not found: {path}")


def _load_model(run: _Run, path: Optional[str]) -> rm.RobotModel:
    _require(path, "model")
    model = rm.load_model(path)
    run.add_input("model", path, None if path else json.dumps(model.to_dict(), sort_keys=True))
    return model


def _load_grid(run: _Run, path: Optional[str]) -> tb.GridSpec:
    _require(path, "grid")
    grid = tb.load_grid(path)
    run.add_input("grid", path, None if path else json.dumps(grid.to_dict(), sort_keys=True))
    return grid


def _load_weights(run: _Run, path: Optional[str]) -> to.TrajOptWeights:
    _require(path, "weights")
    weights = to.load_weights(path)
    run.add_input("weights", path, None if path else json.dumps(weights.to_dict(), sort_keys=True))
    return weights


def _world_path(name: Optional[str]) -> str:
    """A file path, or the name of a shipped world such as ``three_attempts``."""
    if name is None:
        raise ConfigError("--world is required")
    if Path(name).is_file():
        return name
    shipped = sim.shipped_world(name)
    if shipped.is_file():
        return str(shipped)
    raise ConfigError(f"world file not found: {name}")


def _parse_noise(items) -> dict:
    fields = {f.name for f in dataclasses.fields(sim.NoiseSpec)}
    out = {}
    for item in items or []:
        for part in item.split(","):
            key, sep, value = part.partition("=")
            key = key.strip()
            if not sep or key not in fields:
                raise ConfigError(f"--noise expects KEY=SIGMA with KEY in {sorted(fields)}; got {part!r}")
            try:
                out[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"--noise {key}: {value!r} is not a number") from exc
    return out


def _load_world(run: _Run, args, model) -> tuple[sim.World, sim.IdentificationConfig]:
    path = _world_path(args.world)
    world = sim.load_world(path, model)
    run.add_input("world", path)
    noise = dataclasses.replace(world.noise, **_parse_noise(args.noise))
    world = dataclasses.replace(world, noise=noise)
    run.manifest["noise"] = dataclasses.asdict(noise)
    return world, sim.IdentificationConfig(noise=noise)


def _load_table(run: _Run, path: Optional[str]) -> tb.FeasibilityTable:
    if path is None:
        raise ConfigError("--table is required")
    _require(path, "table")
    table = tb.load_table(path)
    run.add_input("table", path)
    return table


# --- subcommands ----------------------------------------------------------------

def cmd_build_table(args) -> int:
    run = _Run(args)
    model = _load_model(run, args.model)
    grid = _load_grid(run, args.grid)
    weights = _load_weights(run, args.weights)
    table, results = tb.build_table(model, grid, weights, jobs=args.jobs)
    tb.save_table(table, run.path("table.json"))
    run.wrote("table.json")
    tb.write_build_report(results, grid, run.path("build_report.csv"))
    run.wrote("build_report.csv")
    monotone = tb.weight_monotonicity(table)
    run.finish(jobs=args.jobs, n_feasible=table.n_feasible, weight_monotonicity=monotone)
    print(f"table: {table.n_feasible}/{grid.n_cells} cells feasible, weight monotonicity "
          f"{monotone:.3f} -> {run.out / 'table.json'}")
    return EXIT_OK


def cmd_validate_table(args) -> int:
    run = _Run(args)
    model = _load_model(run, args.model)
    try:
        table = _load_table(run, args.table)
    except CorruptFile as exc:
        print(f"INTEGRITY FAILURE: {exc}")
        run.finish(passed=False)
        return EXIT_INTEGRITY
    if table.metadata.get("model_digest") != model.digest():
        log.warning("table was built for a different robot model")
    failures = tb.validate_table(model, table)
    with open(run.path("validation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i_weight", "i_com", "i_dist", "knot", "check"])
        for cell, knot, check in failures:
            w.writerow([*cell, "" if knot is None else knot, check])
    run.wrote("validation.csv")
    run.finish(passed=not failures)
    if failures:
        for cell, knot, check in failures[:20]:
            print(f"FAIL cell {cell} knot {knot}: {check}")
        print(f"{len(failures)} failure(s)")
        return EXIT_INTEGRITY
    print(f"table valid: {table.n_feasible} trajectories certified")
    return EXIT_OK


def _identify(run: _Run, args, model):
    world, cfg = _load_world(run, args, model)
    result = sim.run_identification(world, model, cfg, args.seed)
    sim.write_attempt_summary(result.attempts, model, run.path("attempts.csv"))
    run.wrote("attempts.csv")
    sim.write_frame_log(result.attempts, model, run.path("frames.csv"))
    run.wrote("frames.csv")
    for a in result.attempts:
        print(f"attempt {a.attempt}: {a.outcome.value} (grip x {a.grip_x:.4f} m)")
    return result


def _estimate_dict(result) -> dict:
    if result.estimate is not None:
        return {"estimate": dataclasses.asdict(result.estimate)}
    return {"flag": dataclasses.asdict(result.flag)}


def cmd_identify(args) -> int:
    run = _Run(args)
    model = _load_model(run, args.model)
    result = _identify(run, args, model)
    doc = {"outcomes": [o.value for o in result.outcomes], **_estimate_dict(result)}
    run.path("estimate.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    run.wrote("estimate.json")
    run.finish()
    if result.estimate is not None:
        e = result.estimate
        print(f"estimate: weight {e.weight:.4f} N, COM x {e.com_x:.4f} m, "
              f"gripping distance {e.gripping_distance:.4f} m")
    else:
        print(f"identification failed: {result.flag.reason}")
    return EXIT_OK


def _decide(result, table: tb.FeasibilityTable):
    """(feasible, reason, cell, entry) for an identification result."""
    if result.estimate is None:
        reason = "slip" if result.flag.reason == "slip" else "identification failure"
        return False, reason, None, result.flag
    try:
        cell = tb.map_estimate(table.grid, result.estimate)
    except OutOfRange as exc:
        return False, "out-of-range", None, to.InfeasibleFlag(str(exc), "mapping")
    entry = tb.query(table, cell)
    if isinstance(entry, to.Trajectory):
        return True, None, cell, entry
    return False, "flagged cell", cell, entry


def write_trajectory(model: rm.RobotModel, traj: to.Trajectory, path, cell=None) -> None:
    doc = {"schema_version": TRAJECTORY_SCHEMA_VERSION, "model_digest": model.digest(),
           "cell": None if cell is None else list(cell), "trajectory": traj.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_trajectory(path) -> to.Trajectory:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: unreadable trajectory ({exc})") from exc
    if doc.get("schema_version") != TRAJECTORY_SCHEMA_VERSION:
        raise SchemaMismatch(doc.get("schema_version"), TRAJECTORY_SCHEMA_VERSION, "trajectory")
    try:
        return to.Trajectory.from_dict(doc["trajectory"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"{path}: malformed trajectory ({exc})") from exc


def cmd_reason(args) -> int:
    run = _Run(args)
    model = _load_model(run, args.model)
    table = _load_table(run, args.table)
    if table.metadata.get("model_digest") != model.digest():
        log.warning("table was built for a different robot model")
    result = _identify(run, args, model)
    feasible, reason, cell, entry = _decide(result, table)
    decision = {
        "decision": "FEASIBLE" if feasible else "INFEASIBLE",
        "reason": reason,
        "outcomes": [o.value for o in result.outcomes],
        "cell": None if cell is None else list(cell),
        "cell_values": None if cell is None else list(table.grid.values(cell)),
        **_estimate_dict(result),
    }
    if feasible:
        write_trajectory(model, entry, run.path("trajectory.json"), cell)
        run.wrote("trajectory.json")
        to.export_trajectory_csv(model, entry, run.path("trajectory.csv"))
        run.wrote("trajectory.csv")
        decision["trajectory"] = "trajectory.json"
    else:
        decision["detail"] = entry.reason
    run.path("decision.json").write_text(json.dumps(decision, indent=2, sort_keys=True) + "\n")
    run.wrote("decision.json")
    run.finish()
    if feasible:
        print(f"FEASIBLE: cell {tuple(cell)} -> {run.out / 'trajectory.json'}")
    else:
        print(f"INFEASIBLE: {reason} ({entry.reason})")
    return EXIT_OK


def cmd_replay(args) -> int:
    run = _Run(args)
    model = _load_model(run, args.model)
    _require(args.trajectory, "trajectory")
    try:
        traj = load_trajectory(args.trajectory)
    except CorruptFile as exc:
        print(f"INTEGRITY FAILURE: {exc}")
        run.finish(passed=False)
        return EXIT_INTEGRITY
    run.add_input("trajectory", args.trajectory)
    report = to.validate_trajectory(model, traj)
    box = traj.box
    att = (rm.BoxAttachment.grasp(model, traj.q[0], box.weight, box.com_rest)
           if box.weight > 0 else rm.NO_BOX)
    names = [j.name for j in model.joints]
    with open(run.path("replay.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["knot", "t"] + [f"q_{n}" for n in names]
                   + ["cop_x", "cop_margin", "torque_margin", "joint_margin", "control_margin",
                      "collision_clearance", "ground_clearance"])
        for k in range(traj.q.shape[0]):
            ctrl = report.control_margin[k] if k < report.control_margin.size else ""
            w.writerow([k, repr(k * traj.dt)] + [repr(float(v)) for v in traj.q[k]]
                       + [repr(rm.cop_x(model, traj.q[k], att)), repr(float(report.cop_margin[k])),
                          repr(float(report.torque_margin[k])), repr(float(report.joint_margin[k])),
                          "" if ctrl == "" else repr(float(ctrl)),
                          repr(float(report.collision_clearance[k])),
                          repr(float(report.ground_clearance[k]))])
    run.wrote("replay.csv")
    run.finish(passed=report.passed, worst=report.worst())
    if report.passed:
        print(f"replay certified: {traj.q.shape[0]} knots, worst COP margin "
              f"{report.cop_margin.min():.4f} m")
        return EXIT_OK
    for knot, check in report.failures[:20]:
        print(f"FAIL knot {knot}: {check}")
    return EXIT_INTEGRITY


# --- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="robot model JSON (default: shipped NAO-like profile)")
    common.add_argument("--out", default="lift_out", help="output directory (default: lift_out)")

    ident = argparse.ArgumentParser(add_help=False)
    ident.add_argument("--world", help="world JSON file or shipped world name (three_attempts, slip, ...)")
    ident.add_argument("--seed", type=int, default=0, help="RNG seed for sensor noise (default: 0)")
    ident.add_argument("--noise", action="append", metavar="KEY=SIGMA",
                       help="sensor noise override, e.g. load_cell=0.1 (repeatable)")

    p = argparse.ArgumentParser(prog="liftfeas", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-table", parents=[common], help="solve every grid cell")
    b.add_argument("--grid", help="grid JSON (default: 6x6x6 grid)")
    b.add_argument("--weights", help="optimizer weights JSON")
    b.add_argument("--jobs", type=int, default=1, help="worker processes")
    b.set_defaults(func=cmd_build_table)

    v = sub.add_parser("validate-table", parents=[common], help="re-certify stored trajectories")
    v.add_argument("--table", required=True, help="table JSON written by build-table")
    v.set_defaults(func=cmd_validate_table)

    i = sub.add_parser("identify", parents=[common, ident], help="trial-lift identification only")
    i.set_defaults(func=cmd_identify)

    r = sub.add_parser("reason", parents=[common, ident], help="identify, map and decide")
    r.add_argument("--table", required=True, help="table JSON written by build-table")
    r.set_defaults(func=cmd_reason)

    rp = sub.add_parser("replay", parents=[common], help="re-simulate an exported trajectory")
    rp.add_argument("trajectory", help="trajectory JSON written by `reason`")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LIFT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    args.argv = argv
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, SchemaMismatch, DimensionMismatch) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorruptFile as exc:
        print(f"integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LiftFeasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
