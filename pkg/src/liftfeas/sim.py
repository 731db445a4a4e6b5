"""Simulated box world and the trial-lift identification loop.

The world hides the box's true mass and COM.  The robot only sees a force
plate (four load cells), the box pose, and joint torque readings, and it
learns the box parameters by gripping, lifting slightly and reacting to
what happens: slip, rotation, balance or torque trouble, or a clean lift.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import robot as rm
from . import trajopt as to
from .errors import (ConfigError, CopOutsidePlate, GripOffBox, InfeasiblePose, NotGripping,
                     NotLifted, SchemaMismatch, Unreachable, ZeroMass)
from .nlp import NlpProblem, solve

WORLD_SCHEMA_VERSION = "world/1"
FRAME_RATE = 50.0
MASS_EPSILON = 1e-3
GRIP_TOL = 1e-4
# weight of the adjusted quantity against the distance to the previous posture
ADJUST_FOCUS_WEIGHT = 0.15


class LiftOutcome(str, enum.Enum):
    SLIP = "Slip"
    LIFTED = "Lifted"
    ROTATE_AWAY = "RotateAway"
    ROTATE_TOWARD = "RotateToward"
    STABILITY_ABORT = "StabilityAbort"
    TORQUE_ABORT = "TorqueAbort"


@dataclass(frozen=True)
class BoxTruth:
    mass: float
    com_x_box: float
    dims: tuple = (0.260, 0.150, 0.140)  # width, depth (along x), height
    initial_theta_0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        if self.mass < 0:
            raise ConfigError("box mass must be >= 0")
        if not 0.0 <= self.com_x_box <= self.depth:
            raise ConfigError("box COM must lie within the box depth")

    @property
    def depth(self) -> float:
        return self.dims[1]

    @property
    def height(self) -> float:
        return self.dims[2]

    @property
    def weight(self) -> float:
        return self.mass * rm.GRAVITY


@dataclass(frozen=True)
class PlateGeometry:
    """Force plate under the feet: load cells at two x stations, mirrored in y."""

    rear_x: float = -0.080
    front_x: float = 0.120
    half_width: float = 0.060

    def __post_init__(self):
        if self.front_x <= self.rear_x:
            raise ConfigError("plate front_x must exceed rear_x")

    @property
    def cell_positions(self) -> np.ndarray:
        # F1 front-left, F2 front-right, F3 rear-left, F4 rear-right
        return np.array([[self.front_x, self.half_width], [self.front_x, -self.half_width],
                         [self.rear_x, self.half_width], [self.rear_x, -self.half_width]])


@dataclass(frozen=True)
class NoiseSpec:
    load_cell: float = 0.0     # N per cell
    box_pose: float = 0.0      # m for height and x, rad for angle
    joint_torque: float = 0.0  # N m

    def __post_init__(self):
        if min(self.load_cell, self.box_pose, self.joint_torque) < 0:
            raise ConfigError("noise standard deviations must be >= 0")


@dataclass(frozen=True)
class World:
    box: BoxTruth
    contact: rm.HandContactModel
    plate: PlateGeometry = PlateGeometry()
    near_x: float = 0.120
    grip_height: float = 0.120
    # box-frame x of the first grip; None grips the middle of the box
    initial_grip_x: Optional[float] = None
    noise: NoiseSpec = NoiseSpec()
    name: str = "world"

    @property
    def first_grip(self) -> float:
        return 0.5 * self.box.depth if self.initial_grip_x is None else self.initial_grip_x

    def box_params(self, grip_x: float, weight: float = 0.0) -> to.BoxParams:
        """Planner view of the box: unknown load, hand pinned at ``grip_x``."""
        width, depth, height = self.box.dims
        return to.BoxParams(weight, grip_x, 0.0, depth=depth, height=height, width=width,
                            near_x=self.near_x, grip_height=self.grip_height,
                            theta0=self.box.initial_theta_0)

    def to_dict(self) -> dict:
        return {
            "schema_version": WORLD_SCHEMA_VERSION,
            "name": self.name,
            "box": {**asdict(self.box), "dims": list(self.box.dims)},
            "contact": asdict(self.contact),
            "plate": asdict(self.plate),
            "placement": {"near_x": self.near_x, "grip_height": self.grip_height,
                          "initial_grip_x": self.initial_grip_x},
            "noise": asdict(self.noise),
        }

    @classmethod
    def from_dict(cls, d: dict, model: Optional[rm.RobotModel] = None) -> "World":
        if d.get("schema_version") != WORLD_SCHEMA_VERSION:
            raise SchemaMismatch(d.get("schema_version"), WORLD_SCHEMA_VERSION, "world")
        try:
            box = BoxTruth(**d["box"])
            if "contact" in d:
                contact = rm.HandContactModel(**d["contact"])
            elif model is not None:
                contact = model.hand_contact
            else:
                raise ConfigError("world has no contact model and no robot model was given")
            place = d.get("placement", {})
            return cls(box, contact, PlateGeometry(**d.get("plate", {})),
                       place.get("near_x", 0.120), place.get("grip_height", 0.120),
                       place.get("initial_grip_x"), NoiseSpec(**d.get("noise", {})),
                       d.get("name", "world"))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed world: {exc}") from exc


def load_world(path, model: Optional[rm.RobotModel] = None) -> World:
    try:
        return World.from_dict(json.loads(Path(path).read_text()), model)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def shipped_world(name: str) -> Path:
    from importlib import resources
    return Path(str(resources.files("liftfeas.data").joinpath("worlds", f"{name}.json")))


@dataclass(frozen=True)
class IdentificationConfig:
    stability_threshold: float = 0.010       # COP inset from the polygon edges (m)
    torque_threshold: Optional[tuple] = None  # per joint; None -> 0.9 tau_max
    lift_height_threshold: float = 0.010
    rotation_threshold: float = math.radians(5.0)
    grip_step: float = 0.030
    cop_shift: float = 0.010
    torque_reduction: float = 0.05
    max_attempts: int = 10
    steady_window: int = 50
    noise: NoiseSpec = NoiseSpec()
    ramp_frames: int = 25
    lift_frames: int = 25
    lift_height: float = 0.020

    def __post_init__(self):
        for name in ("stability_threshold", "lift_height_threshold", "rotation_threshold",
                     "grip_step", "cop_shift", "torque_reduction", "lift_height"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.max_attempts < 1 or self.steady_window < 1:
            raise ConfigError("max_attempts and steady_window must be >= 1")
        if self.lift_height < self.lift_height_threshold:
            raise ConfigError("lift_height must reach lift_height_threshold")
        if self.torque_threshold is not None:
            object.__setattr__(self, "torque_threshold",
                               tuple(float(v) for v in self.torque_threshold))

    def torque_limits(self, model: rm.RobotModel) -> np.ndarray:
        if self.torque_threshold is None:
            return 0.9 * model.tau_max
        lim = np.asarray(self.torque_threshold, dtype=float)
        if lim.shape != (model.dof,) or np.any(lim <= 0):
            raise ConfigError("torque_threshold needs one positive value per joint")
        return lim


@dataclass(frozen=True)
class SensorFrame:
    load_cells: tuple
    ground_reaction_N: float
    cop_x_measured: float
    box_height_h: float
    box_theta: float
    box_x: float
    joint_torque_readings: tuple
    timestamp: float


@dataclass(frozen=True)
class BoxEstimate:
    weight: float
    com_x: float
    gripping_distance: float


@dataclass(frozen=True)
class Posture:
    q: np.ndarray
    grip_x: float  # box-frame x of the hands
    # bounds imposed by earlier adjustments at this grip, kept by later ones
    held_rows: tuple = ()

    def __eq__(self, other):
        return (isinstance(other, Posture) and np.array_equal(self.q, other.q)
                and self.grip_x == other.grip_x)


# --- contact and sensor models -----------------------------------------------

def grip_oracle(truth: BoxTruth, contact: rm.HandContactModel, grip_x_box: float) -> LiftOutcome:
    """What a firm lift at ``grip_x_box`` would do, from friction force and torque capacity."""
    if contact.f_cap < truth.weight:
        return LiftOutcome.SLIP
    if truth.weight * abs(truth.com_x_box - grip_x_box) <= contact.tau_cap:
        return LiftOutcome.LIFTED
    return LiftOutcome.ROTATE_AWAY if truth.com_x_box > grip_x_box else LiftOutcome.ROTATE_TOWARD


def load_cell_frame(total_N: float, cop_x: float, plate: PlateGeometry = PlateGeometry()):
    """Split a vertical load into the four cells: lever rule front/rear, even left/right."""
    if total_N < 0:
        raise ValueError("total load must be >= 0")
    if not plate.rear_x <= cop_x <= plate.front_x:
        raise CopOutsidePlate(f"COP {cop_x!r} outside plate [{plate.rear_x}, {plate.front_x}]")
    front = total_N * (cop_x - plate.rear_x) / (plate.front_x - plate.rear_x)
    rear = total_N - front
    return (0.5 * front, 0.5 * front, 0.5 * rear, 0.5 * rear)


def plate_readout(cells, plate: PlateGeometry = PlateGeometry()) -> tuple[float, float]:
    """Total load and COP x reconstructed from the four cell forces."""
    f = np.asarray(cells, dtype=float)
    total = float(f.sum())
    cop = float(f @ plate.cell_positions[:, 0] / total) if total > 0 else float("nan")
    return total, cop


def _hand_load(truth: BoxTruth, contact: rm.HandContactModel, hand_x: float, com_x: float,
               fraction: float) -> tuple[float, float]:
    """Vertical force carried by the hands and its x application point.

    Friction caps the force at ``f_cap`` and the couple at ``tau_cap``; a box
    that would need more simply slips or turns in the hands.
    """
    force = min(fraction * truth.weight, contact.f_cap)
    if force <= 0:
        return 0.0, hand_x
    couple = float(np.clip(force * (com_x - hand_x), -contact.tau_cap, contact.tau_cap))
    return force, hand_x + couple / force


@dataclass
class AttemptResult:
    outcome: LiftOutcome
    frames: list
    posture: Posture
    abort_joint: Optional[int] = None


def _measure(rng, sigma, value):
    if sigma > 0:
        return value + rng.normal(0.0, sigma, np.shape(value))
    return value


def simulate_attempt(world: World, model: rm.RobotModel, posture: Posture,
                     cfg: IdentificationConfig = IdentificationConfig(),
                     rng: Union[int, np.random.Generator, None] = 0) -> AttemptResult:
    """Grip, load and micro-lift the box at ``posture``; one frame per 1/50 s.

    Safety is checked on every frame before anything else: the run stops at
    the first frame whose COP leaves the inset polygon (StabilityAbort) or
    whose torque reading exceeds its threshold (TorqueAbort).
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    box = world.box
    q = np.asarray(posture.q, dtype=float)
    fr = rm.forward_kinematics(model, q)
    grip_world = world.box_params(posture.grip_x).grip_point(posture.grip_x)
    if not 0.0 <= posture.grip_x <= box.depth or np.linalg.norm(fr.hand - grip_world) > GRIP_TOL:
        raise NotGripping(f"hand at {fr.hand} is not on grip point {grip_world}")
    noise = cfg.noise
    heel, toe = model.support_polygon
    lo, hi = heel + cfg.stability_threshold, toe - cfg.stability_threshold
    tau_lim = cfg.torque_limits(model)

    origins = fr.origins
    masses = model.masses
    robot_w = model.total_weight_G_robot
    robot_mx = rm.GRAVITY * float(masses @ fr.link_coms[:, 0])
    tau_robot = rm.gravity_torques(model, q)
    joint_x = origins[:-1, 0]
    hand_x = float(fr.hand[0])
    com_world = world.near_x + box.com_x_box

    oracle = grip_oracle(box, world.contact, posture.grip_x)
    n_ramp, n_lift, n_steady = cfg.ramp_frames, cfg.lift_frames, cfg.steady_window
    sign = {LiftOutcome.ROTATE_AWAY: 1.0, LiftOutcome.ROTATE_TOWARD: -1.0}.get(oracle, 0.0)
    frames = []
    for k in range(n_ramp + n_lift + n_steady):
        fraction = min(1.0, (k + 1) / n_ramp)
        lift = 0.0 if k < n_ramp else min(1.0, (k - n_ramp + 1) / n_lift)
        force, x_app = _hand_load(box, world.contact, hand_x, com_world, fraction)
        total = robot_w + force
        cop = (robot_mx + force * x_app) / total
        tau = tau_robot + force * (x_app - joint_x)
        h = 0.0 if oracle is LiftOutcome.SLIP else lift * cfg.lift_height
        theta = box.initial_theta_0 + sign * lift * 2.0 * cfg.rotation_threshold

        cells = _measure(rng, noise.load_cell, np.array(load_cell_frame(total, cop, world.plate)))
        n_meas, cop_meas = plate_readout(cells, world.plate)
        tau_meas = _measure(rng, noise.joint_torque, tau)
        h_meas = float(_measure(rng, noise.box_pose, h))
        th_meas = float(_measure(rng, noise.box_pose, theta))
        x_meas = float(_measure(rng, noise.box_pose, world.near_x))
        frames.append(SensorFrame(tuple(float(v) for v in cells), n_meas, cop_meas, h_meas,
                                  th_meas, x_meas, tuple(float(v) for v in tau_meas),
                                  k / FRAME_RATE))
        if not lo <= cop_meas <= hi:
            return AttemptResult(LiftOutcome.STABILITY_ABORT, frames, posture)
        over = np.abs(tau_meas) / tau_lim
        if over.max() > 1.0:
            return AttemptResult(LiftOutcome.TORQUE_ABORT, frames, posture, int(np.argmax(over)))
    return AttemptResult(oracle, frames, posture)


def classify(frames: Sequence[SensorFrame], cfg: IdentificationConfig) -> LiftOutcome:
    """Outcome of a completed (non-aborted) micro-lift from its steady frames."""
    steady = frames[-cfg.steady_window:]
    h = float(np.mean([f.box_height_h for f in steady]))
    theta = float(np.mean([f.box_theta for f in steady]))
    if h < cfg.lift_height_threshold:
        return LiftOutcome.SLIP
    if theta > cfg.rotation_threshold:
        return LiftOutcome.ROTATE_AWAY
    if theta < -cfg.rotation_threshold:
        return LiftOutcome.ROTATE_TOWARD
    return LiftOutcome.LIFTED


# --- estimators ---------------------------------------------------------------

def estimate_weight(frames: Sequence[SensorFrame], model: rm.RobotModel,
                    window: Optional[int] = None, cfg: IdentificationConfig = IdentificationConfig()
                    ) -> float:
    """Box weight as mean plate load over the steady window minus the robot weight."""
    window = cfg.steady_window if window is None else window
    steady = frames[-window:]
    if not steady or np.mean([f.box_height_h for f in steady]) < cfg.lift_height_threshold:
        raise NotLifted("box is not lifted in the steady window")
    return float(np.mean([f.ground_reaction_N for f in steady])) - model.total_weight_G_robot


def com_from_cop(cop: float, robot_mass: float, robot_com_x: float, box_mass: float) -> float:
    """Invert the system COM equation for the box COM x (foot frame)."""
    if box_mass <= MASS_EPSILON:
        raise ZeroMass(f"box mass {box_mass!r} kg too small to locate its COM")
    return (cop * (robot_mass + box_mass) - robot_mass * robot_com_x) / box_mass


def estimate_com(frames: Sequence[SensorFrame], model: rm.RobotModel, q,
                 window: Optional[int] = None, cfg: IdentificationConfig = IdentificationConfig()
                 ) -> float:
    """Box COM x in the box frame from the steady COP and the measured box pose."""
    window = cfg.steady_window if window is None else window
    steady = frames[-window:]
    weight = estimate_weight(frames, model, window, cfg)
    box_mass = weight / rm.GRAVITY
    cop = float(np.mean([f.cop_x_measured for f in steady]))
    robot_com = rm.system_com(model, q)[0]
    p_box = com_from_cop(cop, model.total_mass, robot_com, box_mass)
    box_x = float(np.mean([f.box_x for f in steady]))
    theta = float(np.mean([f.box_theta for f in steady]))
    # box frame: x measured from the near face along the (possibly tilted) bottom
    return (p_box - box_x) / math.cos(theta)


# --- posture programs ---------------------------------------------------------

def _posture_problem(model, world: World, grip_x: float, q_start, extra_rows=(), anchor=None,
                     focus=(0, 0.0), focus_weight=ADJUST_FOCUS_WEIGHT):
    """Pose NLP: hands on the grip point, robot-only balance and torque limits,
    no collision with the resting box; ``extra_rows`` are ``(sign, column, bound)``.

    Without ``anchor`` the objective centres the COM and keeps torques low;
    with one it is the squared distance to ``anchor`` plus ``focus_weight``
    times the squared deviation of value column ``focus[0]`` from ``focus[1]``.
    """
    box = world.box_params(grip_x)
    km = to._KnotModel(model, box, q_start, carried=False)
    target = box.grip_point(grip_x)
    heel, toe = model.support_polygon
    center = model.polygon_center
    weights = to.TrajOptWeights()
    backoff = weights.backoff
    tau_lim = model.tau_max - backoff
    rows = [(-to.LEN_SCALE, 0, heel + weights.cop_inset + backoff),
            (to.LEN_SCALE, 0, toe - weights.cop_inset - backoff)]
    for j in range(model.dof):
        rows.append((1.0, 1 + j, tau_lim[j]))
        rows.append((-1.0, 1 + j, -tau_lim[j]))
    for i in range(km.n_clear):
        rows.append((-to.LEN_SCALE, km.sl_clear.start + i, backoff))
    rows.extend(extra_rows)
    sign = np.array([r[0] for r in rows])
    idx = np.array([r[1] for r in rows])
    bnd = np.array([r[2] for r in rows])
    cache = {}

    def vals(q):
        key = q.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = (km.values(q[None])[0], km.jacobian(q[None])[0])
        return cache[key]

    sc, st = math.sqrt(2 * weights.initial_cop_weight), math.sqrt(2 * weights.initial_torque_weight)
    sf = math.sqrt(2 * focus_weight)

    if anchor is not None:
        anchor = np.asarray(anchor, dtype=float)
        # the adjusted quantity (column, reference) is also pulled down
        col, ref = focus

        def r(q):
            v, _ = vals(q)
            return np.concatenate([math.sqrt(2.0) * (q - anchor), [sf * (v[col] - ref)]])

        def jr(q):
            _, J = vals(q)
            return np.vstack([math.sqrt(2.0) * np.eye(q.size), sf * J[col][None]])
    else:
        def r(q):
            v, _ = vals(q)
            return np.concatenate([[sc * (v[0] - center)], st * v[km.sl_tau]])

        def jr(q):
            _, J = vals(q)
            return np.vstack([sc * J[:1], st * J[km.sl_tau]])

    hand = [km.i_hand, km.i_hand + 1]
    problem = NlpProblem(
        None, q_start, model.q_min + backoff, model.q_max - backoff,
        eq=lambda q: to.LEN_SCALE * (vals(q)[0][hand] - target),
        ineq=lambda q: sign * (vals(q)[0][idx] - bnd),
        eq_jac=lambda q: to.LEN_SCALE * vals(q)[1][hand],
        ineq_jac=lambda q: sign[:, None] * vals(q)[1][idx],
        residuals=r, residual_jac=jr)
    return problem


def _solve_posture(model, world: World, grip_x: float, starts, extra_rows=(), what="posture",
                   anchor=None, focus=(0, 0.0)):
    if not 0.0 <= grip_x <= world.box.depth:
        raise GripOffBox(f"grip x {grip_x!r} outside box [0, {world.box.depth}]")
    target = world.box_params(grip_x).grip_point(grip_x)
    if np.linalg.norm(target - np.array([0.0, model.base_height])) > model.reach:
        raise Unreachable(f"grip point {target} beyond reach")
    for q0 in starts:
        sol = solve(_posture_problem(model, world, grip_x, q0, extra_rows, anchor, focus),
                    to.POSE_OPTIONS)
        if sol.converged:
            return Posture(sol.point, float(grip_x), tuple(extra_rows))
    raise InfeasiblePose(f"{what}: no converged solution")


def lifting_posture(model: rm.RobotModel, world: World, grip_x: float) -> Posture:
    """Initial gripping posture at ``grip_x`` with no knowledge of the load."""
    target = world.box_params(grip_x).grip_point(grip_x)
    return _solve_posture(model, world, grip_x, to._initial_guesses(model, target),
                          what="lifting posture")


def _hold(posture: Posture, rows: list) -> list:
    """New bounds plus earlier ones on other quantities, so fixes do not undo each other."""
    cols = {r[1] for r in rows}
    return [r for r in posture.held_rows if r[1] not in cols] + rows


def adjust_for_stability(model: rm.RobotModel, world: World, posture: Posture,
                         com_shift: float, cop_x: Optional[float] = None) -> Posture:
    """Re-grip at the same point with the robot COM moved ``com_shift`` away from the
    polygon edge the COP crossed (``cop_x``, default: the robot COM itself)."""
    com = float(rm.system_com(model, posture.q)[0])
    ahead = (com if cop_x is None else cop_x) >= model.polygon_center
    bound = com - com_shift if ahead else com + com_shift
    sign = to.LEN_SCALE if ahead else -to.LEN_SCALE
    rows = _hold(posture, [(sign, 0, bound)])
    return _solve_posture(model, world, posture.grip_x, _starts(model, world, posture), rows,
                          "stability adjustment", anchor=posture.q,
                          focus=(0, model.polygon_center))


def adjust_for_torque(model: rm.RobotModel, world: World, posture: Posture, joint: int,
                      torque_step: float, reading: Optional[float] = None) -> Posture:
    """Re-grip at the same point with the robot-only torque at ``joint`` moved ``torque_step``
    against the sign of the over-limit ``reading`` (default: the robot-only torque)."""
    tau = float(rm.gravity_torques(model, posture.q)[joint])
    positive = (tau if reading is None else reading) >= 0.0
    bound = tau - torque_step if positive else tau + torque_step
    sign = 1.0 if positive else -1.0
    rows = _hold(posture, [(sign, 1 + joint, bound)])
    return _solve_posture(model, world, posture.grip_x, _starts(model, world, posture), rows,
                          "torque adjustment", anchor=posture.q, focus=(1 + joint, 0.0))


class GripDirection(str, enum.Enum):
    FURTHER = "Further"
    CLOSER = "Closer"


def adjust_grip(model: rm.RobotModel, world: World, posture: Posture,
                direction: GripDirection, d: float) -> Posture:
    """Release and re-grip ``d`` further from (or closer to) the robot; no clamping at the edges."""
    step = d if GripDirection(direction) is GripDirection.FURTHER else -d
    grip_x = posture.grip_x + step
    if not 0.0 <= grip_x <= world.box.depth:
        raise GripOffBox(f"grip x {grip_x!r} outside box [0, {world.box.depth}]")
    # the hands let go, so the new posture is planned afresh
    return lifting_posture(model, world, grip_x)


def _starts(model, world, posture: Posture) -> list:
    target = world.box_params(posture.grip_x).grip_point(posture.grip_x)
    return [np.asarray(posture.q, dtype=float)] + to._initial_guesses(model, target)


# --- identification loop ------------------------------------------------------

@dataclass
class AttemptRecord:
    attempt: int
    outcome: LiftOutcome
    grip_x: float
    cop_min: float
    cop_max: float
    max_torque: float
    max_torque_joint: int
    q: tuple
    frames: list = field(repr=False, default_factory=list)


@dataclass
class IdentificationResult:
    estimate: Optional[BoxEstimate]
    flag: Optional[to.InfeasibleFlag]
    attempts: list
    final_posture: Optional[Posture] = None

    @property
    def outcomes(self) -> list:
        return [a.outcome for a in self.attempts]


def _record(i, res: AttemptResult) -> AttemptRecord:
    cops = [f.cop_x_measured for f in res.frames]
    taus = np.abs(np.array([f.joint_torque_readings for f in res.frames]))
    j = int(np.unravel_index(np.argmax(taus), taus.shape)[1])
    return AttemptRecord(i, res.outcome, res.posture.grip_x, min(cops), max(cops),
                         float(taus.max()), j, tuple(float(v) for v in res.posture.q),
                         res.frames)


def run_identification(world: World, model: rm.RobotModel,
                       cfg: IdentificationConfig = IdentificationConfig(),
                       seed: int = 0) -> IdentificationResult:
    """Repeated trial lifts until the box is held cleanly, proven unliftable, or attempts run out."""
    rng = np.random.default_rng(seed)
    attempts = []

    def fail(reason, posture=None):
        return IdentificationResult(None, to.InfeasibleFlag(reason, "identification"),
                                    attempts, posture)

    try:
        posture = lifting_posture(model, world, world.first_grip)
    except (InfeasiblePose, Unreachable, GripOffBox) as exc:
        return fail(f"no lifting posture: {exc}")

    for i in range(1, cfg.max_attempts + 1):
        res = simulate_attempt(world, model, posture, cfg, rng)
        if res.outcome not in (LiftOutcome.STABILITY_ABORT, LiftOutcome.TORQUE_ABORT):
            res.outcome = classify(res.frames, cfg)
        rec = _record(i, res)
        attempts.append(rec)
        try:
            if res.outcome is LiftOutcome.STABILITY_ABORT:
                posture = adjust_for_stability(model, world, posture, cfg.cop_shift,
                                               res.frames[-1].cop_x_measured)
            elif res.outcome is LiftOutcome.TORQUE_ABORT:
                posture = adjust_for_torque(
                    model, world, posture, res.abort_joint, cfg.torque_reduction,
                    res.frames[-1].joint_torque_readings[res.abort_joint])
            elif res.outcome is LiftOutcome.SLIP:
                return fail("slip", posture)
            elif res.outcome is LiftOutcome.ROTATE_AWAY:
                posture = adjust_grip(model, world, posture, GripDirection.FURTHER, cfg.grip_step)
            elif res.outcome is LiftOutcome.ROTATE_TOWARD:
                posture = adjust_grip(model, world, posture, GripDirection.CLOSER, cfg.grip_step)
            else:
                return IdentificationResult(_estimate(res, model, cfg), None, attempts, posture)
        except (InfeasiblePose, Unreachable, GripOffBox) as exc:
            return fail(f"posture adjustment failed: {exc}", posture)
    return fail("attempts exhausted", posture)


def _estimate(res: AttemptResult, model: rm.RobotModel, cfg: IdentificationConfig) -> BoxEstimate:
    weight = max(estimate_weight(res.frames, model, cfg=cfg), 0.0)
    steady = res.frames[-cfg.steady_window:]
    box_x = float(np.mean([f.box_x for f in steady]))
    theta = float(np.mean([f.box_theta for f in steady]))
    hand_x = float(rm.forward_kinematics(model, res.posture.q).hand[0])
    hand_box = (hand_x - box_x) / math.cos(theta)
    try:
        com = estimate_com(res.frames, model, res.posture.q, cfg=cfg)
    except ZeroMass:
        # an empty box exerts no torque anywhere; take the grip point as its COM
        com = hand_box
    com = max(com, 0.0)
    return BoxEstimate(weight, com, abs(hand_box - com))


# --- logs ---------------------------------------------------------------------

def write_attempt_summary(attempts: Sequence[AttemptRecord], model: rm.RobotModel, path) -> None:
    names = [j.name for j in model.joints]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attempt", "outcome", "grip_x", "cop_min", "cop_max", "max_torque",
                    "max_torque_joint", "frames"])
        for a in attempts:
            w.writerow([a.attempt, a.outcome.value, repr(a.grip_x), repr(a.cop_min),
                        repr(a.cop_max), repr(a.max_torque), names[a.max_torque_joint],
                        len(a.frames)])


def write_frame_log(attempts: Sequence[AttemptRecord], model: rm.RobotModel, path) -> None:
    names = [j.name for j in model.joints]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attempt", "frame", "t", "F1", "F2", "F3", "F4", "N", "cop_x",
                    "box_h", "box_theta", "box_x"] + [f"tau_{n}" for n in names])
        for a in attempts:
            for k, f in enumerate(a.frames):
                w.writerow([a.attempt, k, repr(f.timestamp), *map(repr, f.load_cells),
                            repr(f.ground_reaction_N), repr(f.cop_x_measured),
                            repr(f.box_height_h), repr(f.box_theta), repr(f.box_x),
                            *map(repr, f.joint_torque_readings)])
