"""Planar sagittal model of a humanoid carrying a box.

Angles are measured clockwise from the vertical, so a positive absolute
angle tilts a link toward +x (toward the box).  Joint ``j`` sits at the
proximal end of link ``j``; the chain is rooted at the ankle, which is fixed
at ``(0, base_height)`` in the foot frame (origin on the ground below the
ankle, x forward, z up).

Every public function accepts a single configuration.  The underscore
helpers broadcast over leading axes and are what the optimizers call.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionMismatch, SchemaMismatch

GRAVITY = 9.81
MODEL_SCHEMA_VERSION = "robot-model/1"
ELLIPSE_MARGIN = 0.005


@dataclass(frozen=True)
class Link:
    length: float
    mass: float
    com_offset: float
    half_width: float = 0.03
    name: str = ""


@dataclass(frozen=True)
class JointSpec:
    q_min: float
    q_max: float
    tau_max: float
    u_max: float = 0.2
    name: str = ""


@dataclass(frozen=True)
class HandContactModel:
    nominal_grip_force: float
    mu_grip: float
    contact_radius_r_eff: float
    hand_count: int = 2

    @property
    def f_cap(self) -> float:
        return self.hand_count * self.mu_grip * self.nominal_grip_force

    @property
    def tau_cap(self) -> float:
        return self.f_cap * self.contact_radius_r_eff


@dataclass(frozen=True)
class RobotModel:
    links: tuple[Link, ...]
    joints: tuple[JointSpec, ...]
    support_polygon: tuple[float, float]
    hand_contact: HandContactModel
    base_height: float = 0.0
    name: str = "robot"
    # indices of the joints treated as "legs" by the goal-pose program
    leg_joints: tuple[int, ...] = (0, 1)
    # link indices: torso ellipse, and the shank..thigh pair for the leg ellipse
    torso_link: int = 2
    leg_links: tuple[int, int] = (0, 1)

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "support_polygon", tuple(float(v) for v in self.support_polygon))
        object.__setattr__(self, "leg_joints", tuple(self.leg_joints))
        object.__setattr__(self, "leg_links", tuple(self.leg_links))
        if len(self.links) != len(self.joints) or not self.links:
            raise ConfigError("links and joints must be non-empty and of equal length")
        for lk in self.links:
            if not lk.length > 0:
                raise ConfigError(f"link {lk.name!r}: length must be > 0")
            if lk.mass < 0:
                raise ConfigError(f"link {lk.name!r}: mass must be >= 0")
            if not 0 <= lk.com_offset <= lk.length:
                raise ConfigError(f"link {lk.name!r}: com_offset outside [0, length]")
        for jt in self.joints:
            if not jt.q_min < jt.q_max:
                raise ConfigError(f"joint {jt.name!r}: q_min must be < q_max")
            if not (jt.tau_max > 0 and jt.u_max > 0):
                raise ConfigError(f"joint {jt.name!r}: tau_max and u_max must be > 0")
        heel, toe = self.support_polygon
        if not heel < toe:
            raise ConfigError("support_polygon must satisfy x_heel < x_toe")
        hc = self.hand_contact
        if not (hc.nominal_grip_force > 0 and hc.mu_grip > 0
                and hc.contact_radius_r_eff > 0 and hc.hand_count > 0):
            raise ConfigError("hand_contact fields must all be > 0")

    @property
    def dof(self) -> int:
        return len(self.joints)

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([lk.length for lk in self.links])

    @cached_property
    def masses(self) -> np.ndarray:
        return np.array([lk.mass for lk in self.links])

    @cached_property
    def com_offsets(self) -> np.ndarray:
        return np.array([lk.com_offset for lk in self.links])

    @cached_property
    def q_min(self) -> np.ndarray:
        return np.array([jt.q_min for jt in self.joints])

    @cached_property
    def q_max(self) -> np.ndarray:
        return np.array([jt.q_max for jt in self.joints])

    @cached_property
    def tau_max(self) -> np.ndarray:
        return np.array([jt.tau_max for jt in self.joints])

    @cached_property
    def u_max(self) -> np.ndarray:
        return np.array([jt.u_max for jt in self.joints])

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def total_weight_G_robot(self) -> float:
        return GRAVITY * self.total_mass

    @property
    def reach(self) -> float:
        return float(self.lengths.sum())

    @property
    def polygon_center(self) -> float:
        return 0.5 * (self.support_polygon[0] + self.support_polygon[1])

    def joint_index(self, name: str) -> int:
        for i, jt in enumerate(self.joints):
            if jt.name == name:
                return i
        raise KeyError(name)

    def with_tau_scale(self, scale, joints=None) -> "RobotModel":
        """Copy with torque limits multiplied by ``scale`` (all joints or the named ones)."""
        new = []
        for jt in self.joints:
            if joints is None or jt.name in joints:
                jt = JointSpec(jt.q_min, jt.q_max, jt.tau_max * scale, jt.u_max, jt.name)
            new.append(jt)
        return _replace(self, joints=tuple(new))

    def with_support_polygon(self, heel, toe) -> "RobotModel":
        return _replace(self, support_polygon=(heel, toe))

    def to_dict(self) -> dict:
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "name": self.name,
            "base_height": self.base_height,
            "links": [asdict(lk) for lk in self.links],
            "joints": [asdict(jt) for jt in self.joints],
            "support_polygon": list(self.support_polygon),
            "hand_contact": asdict(self.hand_contact),
            "leg_joints": list(self.leg_joints),
            "torso_link": self.torso_link,
            "leg_links": list(self.leg_links),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobotModel":
        version = d.get("schema_version")
        if version != MODEL_SCHEMA_VERSION:
            raise SchemaMismatch(version, MODEL_SCHEMA_VERSION, "robot model")
        try:
            return cls(
                links=tuple(Link(**lk) for lk in d["links"]),
                joints=tuple(JointSpec(**jt) for jt in d["joints"]),
                support_polygon=tuple(d["support_polygon"]),
                hand_contact=HandContactModel(**d["hand_contact"]),
                base_height=d.get("base_height", 0.0),
                name=d.get("name", "robot"),
                leg_joints=tuple(d.get("leg_joints", (0, 1))),
                torso_link=d.get("torso_link", 2),
                leg_links=tuple(d.get("leg_links", (0, 1))),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed robot model: {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _replace(model: RobotModel, **changes) -> RobotModel:
    kw = {f: getattr(model, f) for f in RobotModel.__dataclass_fields__}
    kw.update(changes)
    return RobotModel(**kw)


def load_model(path=None) -> RobotModel:
    """Load a model config; ``None`` gives the shipped NAO-like profile."""
    if path is None:
        text = resources.files("liftfeas.data").joinpath("nao_model.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return RobotModel.from_dict(d)


def default_model() -> RobotModel:
    return load_model(None)


def save_model(model: RobotModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class BoxAttachment:
    """A box held rigidly by the hand.

    ``com_x``/``com_z`` and ``grip_point`` are foot-frame coordinates valid
    when the last link has absolute angle ``hand_angle``; at any other
    configuration the box is carried along with the hand.
    """

    weight_G_box: float
    com_x: float
    grip_point: tuple[float, float]
    attached: bool = True
    com_z: float = 0.0
    hand_angle: float = 0.0

    def __post_init__(self):
        if self.weight_G_box < 0:
            raise ValueError("weight_G_box must be >= 0")
        object.__setattr__(self, "grip_point", tuple(float(v) for v in self.grip_point))

    @property
    def mass(self) -> float:
        return self.weight_G_box / GRAVITY if self.attached else 0.0

    @property
    def com_offset(self) -> np.ndarray:
        return np.array([self.com_x - self.grip_point[0], self.com_z - self.grip_point[1]])

    @classmethod
    def grasp(cls, model: RobotModel, q, weight, com) -> "BoxAttachment":
        """Attach a box whose COM is at ``com`` (x, z) to the hand at ``q``."""
        fr = forward_kinematics(model, q)
        return cls(weight, float(com[0]), (fr.hand[0], fr.hand[1]), True,
                   float(com[1]), float(fr.angles[-1]))


NO_BOX = BoxAttachment(0.0, 0.0, (0.0, 0.0), attached=False)


@dataclass(frozen=True)
class Frames:
    origins: np.ndarray  # (m + 1, 2): joint positions, last row is the hand point
    angles: np.ndarray  # (m,) absolute link angles
    link_coms: np.ndarray  # (m, 2)

    @property
    def hand(self) -> np.ndarray:
        return self.origins[-1]


def rotation(theta):
    """Clockwise rotation in the x-z plane (matches the joint-angle convention)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


def _check_q(model: RobotModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (model.dof,):
        raise DimensionMismatch(f"expected {model.dof} joint angles, got shape {q.shape}")
    return q


def _chain(model: RobotModel, q):
    """Joint origins (..., m+1, 2), absolute angles (..., m), link COMs (..., m, 2)."""
    phi = np.cumsum(q, axis=-1)
    d = np.stack([np.sin(phi), np.cos(phi)], axis=-1)
    seg = d * model.lengths[:, None]
    base = np.zeros(q.shape[:-1] + (1, 2))
    base[..., 0, 1] = model.base_height
    origins = np.concatenate([base, base + np.cumsum(seg, axis=-2)], axis=-2)
    coms = origins[..., :-1, :] + d * model.com_offsets[:, None]
    return origins, phi, coms


def _box_com(box: BoxAttachment, hand, hand_angle):
    """Box COM for hand positions (..., 2) and hand angles (...)."""
    off = box.com_offset
    dth = hand_angle - box.hand_angle
    c, s = np.cos(dth), np.sin(dth)
    x = hand[..., 0] + c * off[0] + s * off[1]
    z = hand[..., 1] - s * off[0] + c * off[1]
    return np.stack([x, z], axis=-1)


def _statics(model: RobotModel, q, box: BoxAttachment):
    """Return (origins, phi, com_xz, total_mass, torques) broadcasting over q."""
    origins, phi, coms = _chain(model, q)
    m = model.masses
    mx = m * coms[..., 0]
    mz = m * coms[..., 1]
    total = model.total_mass
    sum_mx = mx.sum(axis=-1)
    sum_mz = mz.sum(axis=-1)
    # moment of all masses distal to joint j: suffix sums over links j..m-1
    distal_mx = np.cumsum(mx[..., ::-1], axis=-1)[..., ::-1]
    distal_m = np.cumsum(m[::-1])[::-1]
    if box.attached and box.mass > 0:
        mb = box.mass
        pb = _box_com(box, origins[..., -1, :], phi[..., -1])
        sum_mx = sum_mx + mb * pb[..., 0]
        sum_mz = sum_mz + mb * pb[..., 1]
        total = total + mb
        distal_mx = distal_mx + (mb * pb[..., 0])[..., None]
        distal_m = distal_m + mb
    jx = origins[..., :-1, 0]
    tau = GRAVITY * (distal_mx - distal_m * jx)
    com = np.stack([sum_mx / total, sum_mz / total], axis=-1)
    return origins, phi, com, total, tau


def forward_kinematics(model: RobotModel, q) -> Frames:
    q = _check_q(model, q)
    origins, phi, coms = _chain(model, q)
    return Frames(origins, phi, coms)


def system_com(model: RobotModel, q, box: BoxAttachment = NO_BOX) -> tuple[float, float, float]:
    q = _check_q(model, q)
    _, _, com, total, _ = _statics(model, q, box)
    return float(com[0]), float(com[1]), float(total)


def gravity_torques(model: RobotModel, q, box: BoxAttachment = NO_BOX) -> np.ndarray:
    """Static holding torque at every joint.

    ``tau_j = g * sum(m * (x - x_j))`` over the masses distal to joint ``j``
    (box included when attached).  Positive values hold masses that would
    otherwise topple the chain forward.
    """
    q = _check_q(model, q)
    return _statics(model, q, box)[4]


def cop_x(model: RobotModel, q, box: BoxAttachment = NO_BOX) -> float:
    # quasi-static: the COP coincides with the ground projection of the COM
    return system_com(model, q, box)[0]


@dataclass(frozen=True)
class BoxPose:
    """Rectangle in the sagittal plane.

    ``origin`` is the near-bottom corner (box-frame origin, the edge closest
    to the robot) in the foot frame; ``theta`` is clockwise, positive when the
    far end has dropped (rotation away from the robot).
    """

    origin: tuple[float, float]
    depth: float
    height: float
    theta: float = 0.0

    def corners(self) -> np.ndarray:
        local = np.array([[0.0, 0.0], [self.depth, 0.0],
                          [self.depth, self.height], [0.0, self.height]])
        return np.asarray(self.origin) + local @ rotation(self.theta).T

    def to_foot(self, p_box) -> np.ndarray:
        return np.asarray(self.origin) + rotation(self.theta) @ np.asarray(p_box, dtype=float)

    def to_box(self, p_foot) -> np.ndarray:
        return rotation(self.theta).T @ (np.asarray(p_foot, dtype=float) - np.asarray(self.origin))


def box_sample_points(pose: BoxPose, per_edge: int = 0) -> np.ndarray:
    """Corners plus ``per_edge`` evenly spaced interior points on every edge."""
    c = pose.corners()
    if per_edge <= 0:
        return c
    t = np.arange(1, per_edge + 1) / (per_edge + 1)
    pts = [c]
    for i in range(4):
        a, b = c[i], c[(i + 1) % 4]
        pts.append(a + t[:, None] * (b - a))
    return np.concatenate(pts)


def _smooth_relu(x, eps=0.005):
    # smooth max(x, 0); keeps the ellipse shape differentiable for the optimizers
    return 0.5 * (x + np.sqrt(x * x + eps * eps))


def _ellipses(model: RobotModel, origins, phi):
    """Torso and leg collision ellipses: centers (..., 2, 2), axis angles (..., 2), semi-axes (..., 2, 2).

    Each ellipse is the minimal-area ellipse around the margin-inflated
    bounding rectangle of its links, taken in a frame aligned with the
    chain (torso link axis; ankle-to-hip line for the legs).
    """
    t = model.torso_link
    a0, a1 = model.leg_links
    w_t = model.links[t].half_width
    w_l = max(model.links[a0].half_width, model.links[a1].half_width)

    # torso: rectangle around its own link
    t_mid = 0.5 * (origins[..., t, :] + origins[..., t + 1, :])
    t_ang = phi[..., t]
    t_half = np.stack(np.broadcast_arrays(
        np.full(t_ang.shape, 0.5 * model.lengths[t] + ELLIPSE_MARGIN),
        np.full(t_ang.shape, w_t + ELLIPSE_MARGIN)), axis=-1)

    # legs: rectangle around ankle, knee, hip in the ankle->hip frame
    ank = origins[..., a0, :]
    knee = origins[..., a0 + 1, :]
    hip = origins[..., a1 + 1, :]
    axis = hip - ank
    alen = np.linalg.norm(axis, axis=-1)
    ex = axis / alen[..., None]  # along legs (upward-ish)
    ey = np.stack([ex[..., 1], -ex[..., 0]], axis=-1)  # forward normal
    kn = knee - ank
    kv = (kn * ey).sum(axis=-1)
    ku = (kn * ex).sum(axis=-1)
    v_lo = -_smooth_relu(-kv) - w_l
    v_hi = _smooth_relu(kv) + w_l
    u_lo = -_smooth_relu(-ku) - w_l
    u_hi = alen + _smooth_relu(ku - alen) + w_l
    uc = 0.5 * (u_lo + u_hi)
    vc = 0.5 * (v_lo + v_hi)
    l_mid = ank + uc[..., None] * ex + vc[..., None] * ey
    l_ang = np.arctan2(ex[..., 0], ex[..., 1])
    l_half = np.stack([0.5 * (u_hi - u_lo) + ELLIPSE_MARGIN,
                       0.5 * (v_hi - v_lo) + ELLIPSE_MARGIN], axis=-1)

    centers = np.stack([t_mid, l_mid], axis=-2)
    angles = np.stack([t_ang, l_ang], axis=-1)
    semi = np.sqrt(2.0) * np.stack([t_half, l_half], axis=-2)
    return centers, angles, semi


def _ellipse_margin(points, centers, angles, semi):
    """Signed clearance of points (..., P, 2) against ellipses (..., E, ...) -> (..., E, P).

    Scaled radial measure: ``min(A, B) * (r - 1)`` with ``r`` the normalized
    ellipse radius; zero on the boundary, positive outside.
    """
    d = points[..., None, :, :] - centers[..., :, None, :]
    c = np.cos(angles)[..., None]
    s = np.sin(angles)[..., None]
    # components along (sin a, cos a) [major] and (cos a, -sin a) [minor]
    u = d[..., 0] * s + d[..., 1] * c
    v = d[..., 0] * c - d[..., 1] * s
    A = semi[..., 0][..., None]
    B = semi[..., 1][..., None]
    r = np.sqrt((u / A) ** 2 + (v / B) ** 2)
    return np.minimum(A, B) * (r - 1.0)


def collision_ellipses(model: RobotModel, q):
    q = _check_q(model, q)
    origins, phi, _ = _chain(model, q)
    return _ellipses(model, origins, phi)


def collision_clearance(model: RobotModel, q, box_pose: BoxPose, per_edge: int = 0) -> float:
    """Minimum signed clearance of the box outline against the body ellipses (m)."""
    q = _check_q(model, q)
    origins, phi, _ = _chain(model, q)
    centers, angles, semi = _ellipses(model, origins, phi)
    pts = box_sample_points(box_pose, per_edge)
    return float(_ellipse_margin(pts, centers, angles, semi).min())
