"""Discretized box-parameter grid and the precomputed lifting feasibility table.

Each cell of the (weight, COM, gripping distance) grid holds either a
validated :class:`~liftfeas.trajopt.Trajectory` or an
:class:`~liftfeas.trajopt.InfeasibleFlag`.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from . import robot as rm
from . import trajopt as to
from .errors import ConfigError, CorruptFile, IndexOutOfBounds, OutOfRange, SchemaMismatch

log = logging.getLogger(__name__)

TABLE_SCHEMA_VERSION = "feasibility-table/1"
GRID_SCHEMA_VERSION = "grid/1"
# estimates this close to a grid value count as equal to it
SNAP_TOL = 1e-9

Entry = Union[to.Trajectory, to.InfeasibleFlag]


class CellIndex(NamedTuple):
    weight: int
    com: int
    dist: int


def _increasing(name, values):
    values = tuple(float(v) for v in values)
    if not values:
        raise ConfigError(f"{name} must not be empty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"{name} must be strictly increasing")
    if values[0] < 0:
        raise ConfigError(f"{name} must be >= 0")
    return values


@dataclass(frozen=True)
class GridSpec:
    com_x_values: tuple = (0.0, 0.03, 0.06, 0.09, 0.12, 0.15)
    grip_dist_values: tuple = (0.0, 0.03, 0.06, 0.09, 0.12, 0.15)
    weight_values: tuple = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0)
    # width (across the body), depth (along x), height
    box_dims: tuple = (0.260, 0.150, 0.140)
    near_x: float = 0.120
    grip_height: float = 0.120

    def __post_init__(self):
        for name in ("com_x_values", "grip_dist_values", "weight_values"):
            object.__setattr__(self, name, _increasing(name, getattr(self, name)))
        dims = tuple(float(v) for v in self.box_dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise ConfigError("box_dims must be three positive lengths")
        object.__setattr__(self, "box_dims", dims)
        if self.com_x_values[-1] > dims[1]:
            raise ConfigError("com_x_values exceed the box depth")

    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.weight_values), len(self.com_x_values), len(self.grip_dist_values)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    def indices(self) -> list[CellIndex]:
        return [CellIndex(*ix) for ix in itertools.product(*(range(n) for n in self.shape))]

    def contains(self, index) -> bool:
        return len(index) == 3 and all(0 <= int(i) < n for i, n in zip(index, self.shape))

    def values(self, index) -> tuple[float, float, float]:
        i, j, k = index
        return self.weight_values[i], self.com_x_values[j], self.grip_dist_values[k]

    def box_params(self, index) -> to.BoxParams:
        weight, com, dist = self.values(index)
        width, depth, height = self.box_dims
        return to.BoxParams(weight, com, dist, depth=depth, height=height, width=width,
                            near_x=self.near_x, grip_height=self.grip_height)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {"schema_version": GRID_SCHEMA_VERSION,
                **{k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != GRID_SCHEMA_VERSION:
            raise SchemaMismatch(version, GRID_SCHEMA_VERSION, "grid")
        try:
            return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
        except TypeError as exc:
            raise ConfigError(f"malformed grid: {exc}") from exc


def load_grid(path=None) -> GridSpec:
    if path is None:
        return GridSpec()
    try:
        return GridSpec.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


@dataclass
class FeasibilityTable:
    grid: GridSpec
    cells: dict = field(default_factory=dict)  # CellIndex -> Entry
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = {CellIndex(*k): v for k, v in self.cells.items()}

    def feasible(self) -> np.ndarray:
        """Boolean array of shape ``grid.shape``."""
        out = np.zeros(self.grid.shape, dtype=bool)
        for ix, entry in self.cells.items():
            out[ix] = isinstance(entry, to.Trajectory)
        return out

    @property
    def n_feasible(self) -> int:
        return int(self.feasible().sum())


@dataclass(frozen=True)
class CellResult:
    index: CellIndex
    entry: Entry
    wall_time: float


def _solve_cell(args) -> CellResult:
    model, grid, weights, index = args
    t0 = time.perf_counter()
    entry = to.plan_cell(model, grid.box_params(index), weights)
    return CellResult(CellIndex(*index), entry, time.perf_counter() - t0)


def build_metadata(model: rm.RobotModel, grid: GridSpec, weights: to.TrajOptWeights) -> dict:
    return {
        "model_digest": model.digest(),
        "model_name": model.name,
        "weights": weights.to_dict(),
        "pose_options": asdict(to.POSE_OPTIONS),
        "trajectory_options": asdict(to.TRAJ_OPTIONS),
        "edge_samples": to.EDGE_SAMPLES,
    }


def build_table(model: rm.RobotModel, grid: GridSpec = GridSpec(),
                weights: to.TrajOptWeights = to.TrajOptWeights(), jobs: int = 1,
                cells: Optional[Sequence] = None) -> tuple[FeasibilityTable, list[CellResult]]:
    """Solve every cell (or the listed ``cells``) and return the table plus per-cell results.

    Cells are independent and deterministic, so the worker count only
    changes wall time, never the table contents.
    """
    todo = grid.indices() if cells is None else [CellIndex(*c) for c in cells]
    for ix in todo:
        if not grid.contains(ix):
            raise IndexOutOfBounds(f"cell {tuple(ix)} outside grid {grid.shape}")
    work = [(model, grid, weights, ix) for ix in todo]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_cell, work, chunksize=1))
    else:
        results = [_solve_cell(w) for w in work]
    for r in results:
        status = "feasible" if isinstance(r.entry, to.Trajectory) else f"infeasible ({r.entry.stage})"
        log.info("cell %s: %s in %.2fs", tuple(r.index), status, r.wall_time)
    results.sort(key=lambda r: r.index)
    table = FeasibilityTable(grid, {r.index: r.entry for r in results},
                             build_metadata(model, grid, weights))
    return table, results


def write_build_report(results: Sequence[CellResult], grid: GridSpec, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i_weight", "i_com", "i_dist", "weight", "com_x", "grip_dist",
                    "status", "stage", "iterations", "wall_time_s"])
        for r in results:
            feasible = isinstance(r.entry, to.Trajectory)
            w.writerow([*r.index, *grid.values(r.index),
                        "feasible" if feasible else "infeasible",
                        "" if feasible else r.entry.stage,
                        r.entry.iterations if feasible else "",
                        f"{r.wall_time:.3f}"])


def weight_monotonicity(table: FeasibilityTable) -> float:
    """Fraction of (COM, distance) columns whose feasible set is downward-closed in weight."""
    feas = table.feasible()
    _, n_com, n_dist = feas.shape
    good = 0
    for j in range(n_com):
        for k in range(n_dist):
            col = feas[:, j, k]
            # downward-closed: no feasible cell above an infeasible one
            good += not np.any(col[1:] & ~col[:-1])
    return good / (n_com * n_dist)


# --- mapping and query -------------------------------------------------------

def _round_up(values, x, what):
    for i, v in enumerate(values):
        if x <= v + SNAP_TOL:
            return i
    raise OutOfRange(f"{what} {x!r} exceeds the grid maximum {values[-1]!r}")


def _round_down(values, x, what):
    for i in range(len(values) - 1, -1, -1):
        if x >= values[i] - SNAP_TOL:
            return i
    raise OutOfRange(f"{what} {x!r} is below the grid minimum {values[0]!r}")


def map_estimate(grid: GridSpec, est) -> CellIndex:
    """Conservative cell for an estimate: weight and COM round up, gripping distance down."""
    weight, com, dist = float(est.weight), float(est.com_x), float(est.gripping_distance)
    for name, v in (("weight", weight), ("com_x", com), ("gripping_distance", dist)):
        if not np.isfinite(v) or v < 0:
            raise OutOfRange(f"{name} estimate {v!r} must be finite and >= 0")
    return CellIndex(_round_up(grid.weight_values, weight, "weight"),
                     _round_up(grid.com_x_values, com, "com_x"),
                     _round_down(grid.grip_dist_values, dist, "gripping distance"))


def query(table: FeasibilityTable, index) -> Entry:
    if not table.grid.contains(index):
        raise IndexOutOfBounds(f"cell {tuple(index)} outside grid {table.grid.shape}")
    return table.cells[CellIndex(*index)]


def validate_table(model: rm.RobotModel, table: FeasibilityTable) -> list[tuple]:
    """Re-certify every stored trajectory; returns ``(cell, knot, check)`` failures."""
    failures = []
    for ix in table.grid.indices():
        if ix not in table.cells:
            failures.append((tuple(ix), None, "missing"))
            continue
        entry = table.cells[ix]
        if isinstance(entry, to.Trajectory):
            if entry.box != table.grid.box_params(ix):
                failures.append((tuple(ix), None, "box parameters"))
            report = to.validate_trajectory(model, entry)
            failures.extend((tuple(ix), knot, check) for knot, check in report.failures)
    return failures


# --- persistence -------------------------------------------------------------

def _entry_to_dict(index, entry) -> dict:
    if isinstance(entry, to.Trajectory):
        return {"index": list(index), "feasible": True, "trajectory": entry.to_dict()}
    return {"index": list(index), "feasible": False, "reason": entry.reason, "stage": entry.stage}


def _entry_from_dict(d) -> tuple[CellIndex, Entry]:
    ix = CellIndex(*d["index"])
    if d["feasible"]:
        return ix, to.Trajectory.from_dict(d["trajectory"])
    return ix, to.InfeasibleFlag(d["reason"], d.get("stage", ""))


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def table_to_json(table: FeasibilityTable) -> str:
    payload = {
        "grid": table.grid.to_dict(),
        "metadata": table.metadata,
        "cells": [_entry_to_dict(ix, table.cells[ix]) for ix in sorted(table.cells)],
    }
    body = _canonical(payload)
    checksum = hashlib.sha256(body.encode()).hexdigest()
    return ('{"schema_version":' + json.dumps(TABLE_SCHEMA_VERSION)
            + ',"checksum":"' + checksum + '","payload":' + body + "}\n")


def save_table(table: FeasibilityTable, path) -> None:
    Path(path).write_text(table_to_json(table))


def load_table(path) -> FeasibilityTable:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: unreadable table ({exc})") from exc
    if not isinstance(doc, dict) or "payload" not in doc:
        raise CorruptFile(f"{path}: missing payload")
    if doc.get("schema_version") != TABLE_SCHEMA_VERSION:
        raise SchemaMismatch(doc.get("schema_version"), TABLE_SCHEMA_VERSION, "table")
    payload = doc["payload"]
    if hashlib.sha256(_canonical(payload).encode()).hexdigest() != doc.get("checksum"):
        raise CorruptFile(f"{path}: checksum mismatch")
    grid = GridSpec.from_dict(payload["grid"])
    cells = dict(_entry_from_dict(d) for d in payload["cells"])
    return FeasibilityTable(grid, cells, payload["metadata"])
