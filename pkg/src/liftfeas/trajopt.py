"""Quasi-static lifting trajectories by direct collocation.

Three programs share one set of constraint primitives:

* ``solve_initial_config`` -- gripping pose with the box still on the ground,
* ``solve_goal_config`` -- upright pose holding the box at the same orientation,
* ``solve_trajectory`` -- knots ``(q[k], u[k])`` joined by ``q[k+1] = q[k] + u[k] dt``.

``validate_trajectory`` re-checks a result using only :mod:`liftfeas.robot`.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import robot as rm
from .errors import ConfigError, InfeasiblePose, SchemaMismatch, Unreachable
from .nlp import NlpProblem, SolverOptions, solve

WEIGHTS_SCHEMA_VERSION = "trajopt-weights/1"
EDGE_SAMPLES = 2
LEN_SCALE = 100.0


@dataclass(frozen=True)
class BoxParams:
    """Box description used by the planners.

    ``com_x`` and the grip coordinates are box-frame values measured from
    the near (robot-side) face; ``near_x`` places that face in the foot
    frame while the box rests on the ground.
    """

    weight: float
    com_x: float
    grip_distance: float
    depth: float = 0.150
    height: float = 0.140
    width: float = 0.260
    near_x: float = 0.120
    grip_height: float = 0.120
    theta0: float = 0.0

    @property
    def com_z(self) -> float:
        return 0.5 * self.height

    @property
    def rest_pose(self) -> rm.BoxPose:
        return rm.BoxPose((self.near_x, 0.0), self.depth, self.height, self.theta0)

    @property
    def com_rest(self) -> np.ndarray:
        return self.rest_pose.to_foot((self.com_x, self.com_z))

    def grip_interval(self) -> tuple[float, float]:
        """Box-frame x range where the hand may grip: on the box, within the gripping distance."""
        lo = max(0.0, self.com_x - self.grip_distance)
        hi = min(self.depth, self.com_x + self.grip_distance)
        return lo, hi

    def grip_point(self, grip_x_box) -> np.ndarray:
        return self.rest_pose.to_foot((grip_x_box, self.grip_height))


@dataclass(frozen=True)
class TrajOptWeights:
    terminal_weight: float = 100.0
    goal_tracking_weight: float = 1.0
    torque_weight: float = 0.01
    cop_centering_weight: float = 10.0
    initial_cop_weight: float = 10.0
    initial_torque_weight: float = 0.01
    grip_alignment_weight: float = 1.0
    goal_cop_weight: float = 10.0
    goal_torque_weight: float = 0.01
    leg_angle_limit: float = 0.2
    n_knots: int = 20
    duration: float = 10.0
    cop_inset: float = 0.005
    lift_clearance: float = 0.02
    # constraint back-off inside the NLP so validator tolerances hold after rounding
    backoff: float = 1e-4

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_weight") and getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0")
        if self.n_knots < 1 or self.duration <= 0:
            raise ConfigError("n_knots must be >= 1 and duration > 0")

    @property
    def dt(self) -> float:
        return self.duration / self.n_knots

    def to_dict(self) -> dict:
        return {"schema_version": WEIGHTS_SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrajOptWeights":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != WEIGHTS_SCHEMA_VERSION:
            raise SchemaMismatch(version, WEIGHTS_SCHEMA_VERSION, "weights")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"malformed weights: {exc}") from exc


def load_weights(path=None) -> TrajOptWeights:
    if path is None:
        return TrajOptWeights()
    try:
        return TrajOptWeights.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


POSE_OPTIONS = SolverOptions(feas_tol=1e-7, opt_tol=1e-6, max_outer=25)
TRAJ_OPTIONS = SolverOptions(feas_tol=1e-6, opt_tol=1e-5, max_outer=60)


@dataclass(frozen=True)
class InfeasibleFlag:
    reason: str
    stage: str = ""

    def to_dict(self) -> dict:
        return {"infeasible": True, "reason": self.reason, "stage": self.stage}


@dataclass
class Trajectory:
    q: np.ndarray  # (N + 1, m)
    u: np.ndarray  # (N, m)
    dt: float
    box: BoxParams
    grip_x_box: float
    iterations: int = 0
    cost: float = 0.0

    @property
    def n_knots(self) -> int:
        return self.u.shape[0]

    @property
    def box_params(self) -> tuple[float, float, float]:
        return (self.box.weight, self.box.com_x, self.box.grip_distance)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.q.shape[0]) * self.dt

    def theta_box(self, model: rm.RobotModel) -> np.ndarray:
        phi = np.cumsum(self.q, axis=-1)[:, -1]
        return self.box.theta0 + (phi - phi[0])

    def to_dict(self) -> dict:
        return {
            "q": self.q.tolist(),
            "u": self.u.tolist(),
            "dt": self.dt,
            "box": asdict(self.box),
            "grip_x_box": self.grip_x_box,
            "iterations": self.iterations,
            "cost": self.cost,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(np.array(d["q"], dtype=float), np.array(d["u"], dtype=float), d["dt"],
                   BoxParams(**d["box"]), d["grip_x_box"], d.get("iterations", 0), d.get("cost", 0.0))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (np.array_equal(self.q, other.q) and np.array_equal(self.u, other.u)
                and self.dt == other.dt and self.box == other.box
                and self.grip_x_box == other.grip_x_box and self.iterations == other.iterations
                and self.cost == other.cost)


def _attachment(model, box: BoxParams, q0) -> rm.BoxAttachment:
    return rm.BoxAttachment.grasp(model, q0, box.weight, box.com_rest)


def _carried_pose(box: BoxParams, hand0, phi0, hand, phi) -> tuple[np.ndarray, np.ndarray]:
    """Box-frame origin and angle for hands carried from (hand0, phi0) to (hand, phi)."""
    dth = phi - phi0
    rel = np.asarray(box.rest_pose.origin) - hand0
    c, s = np.cos(dth), np.sin(dth)
    ox = hand[..., 0] + c * rel[0] + s * rel[1]
    oz = hand[..., 1] - s * rel[0] + c * rel[1]
    return np.stack([ox, oz], axis=-1), box.theta0 + dth


def _box_points(box: BoxParams, origin, theta) -> np.ndarray:
    local = rm.box_sample_points(rm.BoxPose((0.0, 0.0), box.depth, box.height, 0.0), EDGE_SAMPLES)
    c, s = np.cos(theta)[..., None], np.sin(theta)[..., None]
    x = origin[..., None, 0] + c * local[:, 0] + s * local[:, 1]
    z = origin[..., None, 1] - s * local[:, 0] + c * local[:, 1]
    return np.stack([x, z], axis=-1)


class _KnotModel:
    """Batched per-configuration quantities for one lifting problem.

    ``values(Q)`` maps configurations (K, m) to a (K, n_f) block holding the
    system COM x, the joint torques, the box clearances and the lowest box
    point; ``jacobian(Q)`` differentiates every row w.r.t. its own q by
    batched central differences.
    """

    def __init__(self, model, box: BoxParams, q_ref, carried: bool):
        self.model = model
        self.box = box
        self.att = _attachment(model, box, q_ref) if box.weight > 0 else rm.BoxAttachment(
            0.0, 0.0, (0.0, 0.0), attached=False)
        fr = rm.forward_kinematics(model, q_ref)
        self.hand0 = fr.hand
        self.phi0 = fr.angles[-1]
        self.carried = carried
        m = model.dof
        self.sl_com = 0
        self.sl_tau = slice(1, 1 + m)
        self.n_clear = 2 * (4 + 4 * EDGE_SAMPLES)
        self.sl_clear = slice(1 + m, 1 + m + self.n_clear)
        self.i_bottom = 1 + m + self.n_clear
        self.i_hand = self.i_bottom + 1  # hand x, hand z, hand angle
        self.n = self.i_hand + 3

    def values(self, Q) -> np.ndarray:
        model = self.model
        if self.carried:
            origins, phi, com, _, tau = rm._statics(model, Q, self.att)
        else:
            # box still resting in place: its weight acts at a fixed world point
            origins, phi, com, total, tau = rm._statics(model, Q, rm.NO_BOX)
            if self.box.weight > 0:
                cx = self.box.com_rest[0]
                tau = tau + self.box.weight * (cx - origins[..., :-1, 0])
                mb = self.box.weight / rm.GRAVITY
                com = com.copy()
                com[..., 0] = (total * com[..., 0] + mb * cx) / (total + mb)
        hand = origins[..., -1, :]
        if self.carried:
            origin, theta = _carried_pose(self.box, self.hand0, self.phi0, hand, phi[..., -1])
        else:
            shape = Q.shape[:-1]
            origin = np.broadcast_to(np.asarray(self.box.rest_pose.origin), shape + (2,))
            theta = np.full(shape, self.box.theta0)
        pts = _box_points(self.box, origin, theta)
        centers, angles, semi = rm._ellipses(model, origins, phi)
        clear = rm._ellipse_margin(pts, centers, angles, semi).reshape(Q.shape[:-1] + (-1,))
        bottom = pts[..., 1].min(axis=-1)
        return np.concatenate([com[..., :1], tau, clear, bottom[..., None],
                               hand, phi[..., -1:]], axis=-1)

    def jacobian(self, Q):
        Q = np.atleast_2d(Q)
        K, m = Q.shape
        h = 1e-6 * (1.0 + np.abs(Q))
        pert = np.repeat(Q[None], 2 * m, axis=0)
        for j in range(m):
            pert[2 * j, :, j] += h[:, j]
            pert[2 * j + 1, :, j] -= h[:, j]
        vals = self.values(pert.reshape(2 * m * K, m)).reshape(2 * m, K, self.n)
        jac = np.empty((K, self.n, m))
        for j in range(m):
            jac[:, :, j] = (vals[2 * j] - vals[2 * j + 1]) / (2 * h[:, j])[:, None]
        return jac


def _pose_problem(model, box, weights: TrajOptWeights, km: _KnotModel, x0, kind: str, extra=None):
    """Build the single-configuration NLP for the initial or goal pose."""
    m = model.dof
    heel, toe = model.support_polygon
    lo_cop = heel + weights.cop_inset + weights.backoff
    hi_cop = toe - weights.cop_inset - weights.backoff
    center = model.polygon_center
    tau_lim = model.tau_max - weights.backoff
    grip_lo, grip_hi = box.grip_interval()
    grip_pt_lo = box.grip_point(grip_lo)[0]
    grip_pt_hi = box.grip_point(grip_hi)[0]
    grip_z = box.grip_point(0.0)[1]
    com_box_x = box.com_rest[0]
    w_com, w_tau = (weights.initial_cop_weight, weights.initial_torque_weight) if kind == "initial" else (weights.goal_cop_weight, weights.goal_torque_weight)

    cache = {}

    def vals(q):
        key = q.tobytes()
        if key not in cache:
            cache.clear()
            v = km.values(q[None])[0]
            J = km.jacobian(q[None])[0]
            cache[key] = (v, J)
        return cache[key]

    # objective as 0.5 * |r|^2
    sc, st, sh = np.sqrt(2 * w_com), np.sqrt(2 * w_tau), np.sqrt(2 * weights.grip_alignment_weight)

    def r(q):
        v, _ = vals(q)
        out = [[sc * (v[0] - center)], st * v[km.sl_tau]]
        if kind == "initial":
            out.append([sh * box.weight * (com_box_x - v[km.i_hand])])
        return np.concatenate(out)

    def jr(q):
        _, J = vals(q)
        out = [sc * J[:1], st * J[km.sl_tau]]
        if kind == "initial":
            out.append(-sh * box.weight * J[km.i_hand][None])
        return np.vstack(out)

    # inequality rows as (sign, row index, bound): sign * (v[row] - bound) <= 0,
    # lengths scaled to centimetres so every row is O(1)
    rows = [(-LEN_SCALE, 0, lo_cop), (LEN_SCALE, 0, hi_cop)]
    for j in range(m):
        rows.append((1.0, 1 + j, tau_lim[j]))
        rows.append((-1.0, 1 + j, -tau_lim[j]))
    for i in range(km.n_clear):
        rows.append((-LEN_SCALE, km.sl_clear.start + i, weights.backoff))
    pinned_grip = kind == "initial" and grip_pt_hi - grip_pt_lo < 1e-9
    if kind == "initial" and not pinned_grip:
        rows.append((-LEN_SCALE, km.i_hand, grip_pt_lo))
        rows.append((LEN_SCALE, km.i_hand, grip_pt_hi))
    elif kind == "goal":
        rows.append((-LEN_SCALE, km.i_bottom, weights.lift_clearance))
    sign = np.array([r[0] for r in rows])
    idx = np.array([r[1] for r in rows])
    bnd = np.array([r[2] for r in rows])

    def c(q):
        v, _ = vals(q)
        return sign * (v[idx] - bnd)

    def jc(q):
        _, J = vals(q)
        return sign[:, None] * J[idx]

    if kind == "initial":
        # hand on the grip height; zero gripping distance pins the grip x as well
        eq_rows = [km.i_hand + 1] + ([km.i_hand] if pinned_grip else [])
        eq_target = np.array([grip_z] + ([grip_pt_lo] if pinned_grip else []))

        def h(q):
            v, _ = vals(q)
            return LEN_SCALE * (v[eq_rows] - eq_target)

        def jh(q):
            _, J = vals(q)
            return LEN_SCALE * J[eq_rows]
    else:
        phi_target = extra

        def h(q):
            v, _ = vals(q)
            return np.array([v[km.i_hand + 2] - phi_target])

        def jh(q):
            _, J = vals(q)
            return J[km.i_hand + 2][None]

    lo = model.q_min + weights.backoff
    hi = model.q_max - weights.backoff
    if kind == "goal":
        for j in model.leg_joints:
            lo[j] = max(lo[j], -weights.leg_angle_limit + weights.backoff)
            hi[j] = min(hi[j], weights.leg_angle_limit - weights.backoff)
    return NlpProblem(None, x0, lo, hi, eq=h, ineq=c, eq_jac=jh, ineq_jac=jc,
                      residuals=r, residual_jac=jr)


def _arm_ik(model, q_legs, target, elbow_sign):
    """Shoulder/elbow angles putting the hand on ``target`` for fixed ankle/knee/hip."""
    L = model.lengths
    phi = np.cumsum(q_legs)
    p = np.array([0.0, model.base_height])
    for i in range(3):
        p = p + L[i] * np.array([np.sin(phi[i]), np.cos(phi[i])])
    d = np.asarray(target) - p
    r = np.hypot(*d)
    a, b = L[3], L[4]
    if r > a + b or r < abs(a - b):
        return None
    cos_e = (r * r - a * a - b * b) / (2 * a * b)
    e = elbow_sign * np.arccos(np.clip(cos_e, -1, 1))
    base = np.arctan2(d[0], d[1])
    # upper-arm angle so that the two-link arm reaches the target
    k = np.arctan2(b * np.sin(e), a + b * np.cos(e))
    phi_upper = base - k
    return np.array([q_legs[0], q_legs[1], q_legs[2], phi_upper - phi[2], e])


def _wrap_into(q, lo, hi):
    q = q.copy()
    for j in range(q.size):
        while q[j] > hi[j]:
            q[j] -= 2 * np.pi
        while q[j] < lo[j]:
            q[j] += 2 * np.pi
    return q


LEG_SEEDS = ((0.85, -1.90, 1.60), (0.70, -1.60, 1.55), (0.50, -1.20, 1.60), (0.20, -0.50, 1.65),
             (-0.15, -0.10, 1.70))


def _initial_guesses(model, target):
    guesses = []
    for seed in LEG_SEEDS:
        for sgn in (-1.0, 1.0):
            q = _arm_ik(model, np.array(seed), target, sgn)
            if q is None:
                continue
            q = _wrap_into(q, model.q_min, model.q_max)
            if np.all(q >= model.q_min) and np.all(q <= model.q_max):
                guesses.append(q)
    if not guesses:
        guesses.append(np.clip(np.array([0.4, -0.9, 0.8, 2.3, -0.9])[:model.dof],
                               model.q_min, model.q_max))
    return guesses


def _best(model, box, weights, km, guesses, kind, extra, options):
    best = None
    for x0 in guesses:
        sol = solve(_pose_problem(model, box, weights, km, x0, kind, extra), options)
        if sol.converged:
            return sol
    return best


def solve_initial_config(model: rm.RobotModel, box: BoxParams,
                         weights: TrajOptWeights = TrajOptWeights(),
                         options: SolverOptions = POSE_OPTIONS,
                         guesses=None) -> np.ndarray:
    """Gripping pose for the box at rest.

    Raises
    ------
    Unreachable
        No admissible grip point lies within the arm chain's reach.
    InfeasiblePose
        The optimizer found no pose satisfying every constraint.
    """
    lo, hi = box.grip_interval()
    base = np.array([0.0, model.base_height])
    p_lo, p_hi = box.grip_point(lo), box.grip_point(hi)
    # closest admissible grip point to the chain root
    t = np.clip((base - p_lo) @ (p_hi - p_lo) / max((p_hi - p_lo) @ (p_hi - p_lo), 1e-300), 0, 1)
    nearest = p_lo + t * (p_hi - p_lo)
    if np.linalg.norm(nearest - base) > model.reach:
        raise Unreachable(f"grip point {nearest} beyond reach {model.reach:.3f} m")
    if guesses is None:
        target = box.grip_point(0.5 * (lo + hi))
        guesses = _initial_guesses(model, target)
    km = _KnotModel(model, box, guesses[0], carried=False)
    sol = _best(model, box, weights, km, guesses, "initial", None, options)
    if sol is None:
        raise InfeasiblePose("initial pose: no converged solution")
    return sol.point


def _goal_guesses(model, q0):
    """Straight-legged seeds keeping the hand angle of ``q0``.

    A bent hip comes first: with the trunk upright the arm has to fold back
    over the shoulder and the solver tends to stall there.
    """
    phi_hand = np.cumsum(q0)[-1]
    out = []
    for hip, elbow in itertools.product((0.8, 0.0, 1.6), (0.0, -0.4, -0.8, -1.2)):
        q = np.array([0.0, 0.0, hip, phi_hand - hip - elbow, elbow])
        q = _wrap_into(q, model.q_min, model.q_max)
        if np.all(q >= model.q_min) and np.all(q <= model.q_max):
            out.append(q)
    return out or [np.clip(q0, model.q_min, model.q_max)]


def solve_goal_config(model: rm.RobotModel, box: BoxParams, q0,
                      weights: TrajOptWeights = TrajOptWeights(),
                      options: SolverOptions = POSE_OPTIONS, guesses=None) -> np.ndarray:
    """Upright holding pose with the box orientation pinned to that at ``q0``."""
    q0 = np.asarray(q0, dtype=float)
    km = _KnotModel(model, box, q0, carried=True)
    phi_target = float(np.cumsum(q0)[-1])
    if guesses is None:
        guesses = _goal_guesses(model, q0)
    sol = _best(model, box, weights, km, guesses, "goal", phi_target, options)
    if sol is None:
        raise InfeasiblePose("goal pose: no converged solution")
    return sol.point


def _rollout(q0, U, dt):
    """States q[1..N] from the Euler recursion q[k+1] = q[k] + dt u[k], exactly."""
    q = np.empty((U.shape[0] + 1, q0.size))
    q[0] = q0
    for k in range(U.shape[0]):
        q[k + 1] = q[k] + U[k] * dt
    return q


def solve_trajectory(model: rm.RobotModel, box: BoxParams, q0, qf,
                     weights: TrajOptWeights = TrajOptWeights(),
                     options: SolverOptions = TRAJ_OPTIONS,
                     grip_x_box: Optional[float] = None) -> Union[Trajectory, InfeasibleFlag]:
    """Lifting motion from ``q0`` (box at rest) toward ``qf``.

    The free variables are the knot states of the first ``dof - 1`` joints;
    the last joint absorbs the hand angle so its rate is exactly zero, and
    controls are the Euler differences of consecutive knots.
    Returns an :class:`InfeasibleFlag` when the NLP does not converge or the
    resulting trajectory fails validation.
    """
    q0 = np.asarray(q0, dtype=float)
    qf = np.asarray(qf, dtype=float)
    m = model.dof
    n = weights.n_knots
    dt = weights.dt
    km = _KnotModel(model, box, q0, carried=True)
    if grip_x_box is None:
        grip_x_box = float(box.rest_pose.to_box(km.hand0)[0])
    heel, toe = model.support_polygon
    center = model.polygon_center
    tau_lim = model.tau_max - weights.backoff
    umax = model.u_max - weights.backoff

    rows = [(-LEN_SCALE, 0, heel + weights.cop_inset + weights.backoff),
            (LEN_SCALE, 0, toe - weights.cop_inset - weights.backoff)]
    for j in range(m):
        rows.append((1.0, 1 + j, tau_lim[j]))
        rows.append((-1.0, 1 + j, -tau_lim[j]))
    for i in range(km.n_clear):
        rows.append((-LEN_SCALE, km.sl_clear.start + i, weights.backoff))
    rows.append((-LEN_SCALE, km.i_bottom, weights.backoff))
    sign = np.array([r[0] for r in rows])
    idx = np.array([r[1] for r in rows])
    bnd = np.array([r[2] for r in rows])
    nr = len(rows)

    # free variables: knot states of the first dof-1 joints; the last joint
    # keeps the hand angle (sum of joint angles) fixed at its initial value
    E = np.vstack([np.eye(m - 1), -np.ones((1, m - 1))])
    last = np.zeros(m)
    last[-1] = q0.sum()
    qlo = model.q_min + weights.backoff
    qhi = model.q_max - weights.backoff
    cache = {}

    def states(x):
        return x.reshape(n, m - 1) @ E.T + last

    def rates(Q):
        return np.diff(np.vstack([q0, Q]), axis=0) / dt

    def vals(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            Q = states(x)
            cache[key] = (Q, km.values(Q), km.jacobian(Q))
        return cache[key]

    wf, wq, wt, wc = (np.sqrt(weights.terminal_weight), np.sqrt(2 * weights.goal_tracking_weight),
                      np.sqrt(2 * weights.torque_weight), np.sqrt(2 * weights.cop_centering_weight))
    nx = n * (m - 1)

    def knot_to_x(JQ):
        # (rows, n, m) derivatives wrt knot states -> (rows, nx)
        return (JQ @ E).reshape(JQ.shape[0], nx)

    def r(x):
        Q, v, _ = vals(x)
        return np.concatenate([wf * (Q[-1] - qf), wq * (Q - qf).ravel(),
                               wt * v[:, km.sl_tau].ravel(), wc * (v[:, 0] - center)])

    def jr(x):
        _, _, J = vals(x)
        out = np.zeros((m + n * m + n * m + n, n, m))
        out[np.arange(m), n - 1, np.arange(m)] = wf
        rows = m + np.arange(n * m)
        out[rows, np.repeat(np.arange(n), m), np.tile(np.arange(m), n)] = wq
        o = m + n * m
        for k in range(n):
            out[o + k * m:o + (k + 1) * m, k] = wt * J[k, km.sl_tau]
            out[o + n * m + k, k] = wc * J[k, 0]
        return knot_to_x(out)

    def c(x):
        Q, v, _ = vals(x)
        U = rates(Q)
        knot = (sign * (v[:, idx] - bnd)).ravel()
        return np.concatenate([knot, qlo[-1] - Q[:, -1], Q[:, -1] - qhi[-1],
                               (U - umax).ravel(), (-U - umax).ravel()])

    n_knot = n * nr

    def jc(x):
        _, _, J = vals(x)
        out = np.zeros((n_knot + 2 * n + 2 * n * m, n, m))
        blocks = sign[None, :, None] * J[:, idx, :]          # (n, nr, m)
        for k in range(n):
            out[k * nr:(k + 1) * nr, k] = blocks[k]
        o = n_knot
        out[o + np.arange(n), np.arange(n), m - 1] = -1.0
        out[o + n + np.arange(n), np.arange(n), m - 1] = 1.0
        o += 2 * n
        for k in range(n):
            for j in range(m):
                row = o + k * m + j
                out[row, k, j] = 1.0 / dt
                if k > 0:
                    out[row, k - 1, j] = -1.0 / dt
        out[o + n * m:] = -out[o:o + n * m]
        return knot_to_x(out)

    # straight-line start, rate-limited
    U0 = np.clip(np.tile((qf - q0) / (n * dt), (n, 1)), -umax, umax)
    U0 -= U0.mean(axis=1, keepdims=True)
    Q0 = q0 + dt * np.cumsum(U0, axis=0)
    problem = NlpProblem(None, Q0[:, :-1].ravel(), np.tile(qlo[:-1], n), np.tile(qhi[:-1], n),
                         ineq=c, ineq_jac=jc, residuals=r, residual_jac=jr)
    sol = solve(problem, options)
    if not sol.converged:
        return InfeasibleFlag(f"trajectory solver status {sol.status.value}", "trajectory")

    U = rates(states(sol.point))
    U = U - U.mean(axis=1, keepdims=True)
    U = np.clip(U, -model.u_max, model.u_max)
    q = _rollout(q0, U, dt)
    traj = Trajectory(q, U, dt, box, grip_x_box, sol.iterations, float(sol.objective_value))
    report = validate_trajectory(model, traj)
    if not report.passed:
        return InfeasibleFlag(f"validation failed: {report.failures[:3]}", "validation")
    return traj


@dataclass(frozen=True)
class ValidationTolerances:
    margin: float = 1e-6
    grip: float = 1e-4
    theta: float = 1e-6
    cop_inset: float = 0.005
    edge_samples: int = EDGE_SAMPLES


@dataclass
class ValidationReport:
    cop_margin: np.ndarray
    torque_margin: np.ndarray
    joint_margin: np.ndarray
    control_margin: np.ndarray
    collision_clearance: np.ndarray
    ground_clearance: np.ndarray
    grip_error: float
    theta_drift: float
    transcription_exact: bool
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def worst(self) -> dict:
        return {
            "cop_margin": float(self.cop_margin.min()),
            "torque_margin": float(self.torque_margin.min()),
            "joint_margin": float(self.joint_margin.min()),
            "control_margin": float(self.control_margin.min()),
            "collision_clearance": float(self.collision_clearance.min()),
            "ground_clearance": float(self.ground_clearance.min()),
            "grip_error": self.grip_error,
            "theta_drift": self.theta_drift,
        }


def validate_trajectory(model: rm.RobotModel, traj: Trajectory,
                        tol: ValidationTolerances = ValidationTolerances()) -> ValidationReport:
    """Pointwise certification of ``traj`` using the robot-model primitives only."""
    box = traj.box
    q, u = np.asarray(traj.q), np.asarray(traj.u)
    K = q.shape[0]
    if q.shape[1] != model.dof or u.shape != (K - 1, model.dof):
        raise rm.DimensionMismatch("trajectory dimensions do not match the model")
    failures = []
    fr0 = rm.forward_kinematics(model, q[0])
    grip = box.grip_point(traj.grip_x_box)
    grip_error = float(np.linalg.norm(fr0.hand - grip))
    if grip_error > tol.grip:
        failures.append((0, "grip"))
    att = rm.BoxAttachment.grasp(model, q[0], box.weight, box.com_rest)
    if box.weight <= 0:
        att = rm.NO_BOX
    heel, toe = model.support_polygon
    rest = box.rest_pose
    cop_m, tau_m, joint_m, clear, ground = [], [], [], [], []
    thetas = []
    for k in range(K):
        fr = rm.forward_kinematics(model, q[k])
        cx = rm.cop_x(model, q[k], att)
        cop_m.append(min(cx - (heel + tol.cop_inset), (toe - tol.cop_inset) - cx))
        tau_m.append(float((model.tau_max - np.abs(rm.gravity_torques(model, q[k], att))).min()))
        joint_m.append(float(np.minimum(q[k] - model.q_min, model.q_max - q[k]).min()))
        dth = fr.angles[-1] - fr0.angles[-1]
        thetas.append(dth)
        origin = fr.hand + rm.rotation(dth) @ (np.asarray(rest.origin) - fr0.hand)
        pose = rm.BoxPose(tuple(origin), box.depth, box.height, box.theta0 + dth)
        clear.append(rm.collision_clearance(model, q[k], pose, tol.edge_samples) if k > 0 else np.inf)
        ground.append(pose.corners()[:, 1].min())
    ctrl_m = (model.u_max - np.abs(u)).min(axis=1)
    exact = bool(np.all(q == _rollout(q[0], u, traj.dt)))
    report = ValidationReport(np.array(cop_m), np.array(tau_m), np.array(joint_m), ctrl_m,
                              np.array(clear), np.array(ground), grip_error,
                              float(np.max(np.abs(thetas))), exact)
    for name, arr in (("cop", report.cop_margin), ("torque", report.torque_margin),
                      ("joint", report.joint_margin), ("collision", report.collision_clearance),
                      ("ground", report.ground_clearance)):
        for k in np.flatnonzero(arr < -tol.margin):
            failures.append((int(k), name))
    for k in np.flatnonzero(ctrl_m < -tol.margin):
        failures.append((int(k), "control"))
    if not exact:
        bad = np.flatnonzero(np.any(q != _rollout(q[0], u, traj.dt), axis=1))
        failures.extend((int(k), "transcription") for k in bad)
    if report.theta_drift > tol.theta:
        failures.append((int(np.argmax(np.abs(thetas))), "theta"))
    report.failures = sorted(failures)
    return report


def export_trajectory_csv(model: rm.RobotModel, traj: Trajectory, path) -> None:
    """Per-knot plotting data: index, time, joint angles, controls, COP and torques."""
    box = traj.box
    att = rm.BoxAttachment.grasp(model, traj.q[0], box.weight, box.com_rest) if box.weight > 0 else rm.NO_BOX
    names = [jt.name or f"j{i}" for i, jt in enumerate(model.joints)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["knot", "t"] + [f"q_{n}" for n in names] + [f"u_{n}" for n in names]
                   + ["cop_x"] + [f"tau_{n}" for n in names])
        for k in range(traj.q.shape[0]):
            uk = traj.u[k] if k < traj.u.shape[0] else np.zeros(model.dof)
            tau = rm.gravity_torques(model, traj.q[k], att)
            w.writerow([k, repr(k * traj.dt)] + [repr(float(v)) for v in traj.q[k]]
                       + [repr(float(v)) for v in uk] + [repr(rm.cop_x(model, traj.q[k], att))]
                       + [repr(float(v)) for v in tau])


def plan_cell(model: rm.RobotModel, box: BoxParams, weights: TrajOptWeights = TrajOptWeights(),
              ) -> Union[Trajectory, InfeasibleFlag]:
    """Initial pose -> goal pose -> trajectory; any stage failure yields a flag."""
    try:
        q0 = solve_initial_config(model, box, weights)
    except (Unreachable, InfeasiblePose) as exc:
        return InfeasibleFlag(str(exc), "initial")
    try:
        qf = solve_goal_config(model, box, q0, weights)
    except InfeasiblePose as exc:
        return InfeasibleFlag(str(exc), "goal")
    return solve_trajectory(model, box, q0, qf, weights)
