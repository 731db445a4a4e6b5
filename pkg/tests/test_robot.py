import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liftfeas import robot as rm
from liftfeas.errors import ConfigError, DimensionMismatch, SchemaMismatch

from conftest import oracle_com_x, oracle_points, oracle_potential, random_configs


def central_diff(f, q, h=1e-6):
    g = np.zeros_like(q)
    for i in range(q.size):
        e = np.zeros_like(q)
        e[i] = h
        g[i] = (f(q + e) - f(q - e)) / (2 * h)
    return g


def test_forward_kinematics_matches_loop_oracle(model):
    for q in random_configs(model, 50, seed=1):
        fr = rm.forward_kinematics(model, q)
        origins, coms, phi = oracle_points(model, q)
        np.testing.assert_allclose(fr.origins, origins, atol=1e-14)
        np.testing.assert_allclose(fr.link_coms, coms, atol=1e-14)
        assert fr.angles[-1] == pytest.approx(phi, abs=1e-14)


def test_upright_pose_stacks_links_vertically(model):
    fr = rm.forward_kinematics(model, np.zeros(model.dof))
    np.testing.assert_allclose(fr.origins[:, 0], 0.0)
    assert fr.hand[1] == pytest.approx(model.base_height + model.lengths.sum())


def test_torques_are_negative_potential_gradient(model):
    for q in random_configs(model, 30, seed=2):
        fd = -central_diff(lambda y: oracle_potential(model, y), q)
        np.testing.assert_allclose(rm.gravity_torques(model, q), fd, rtol=1e-6, atol=1e-7)


def test_torques_with_attached_box(model):
    for k, q in enumerate(random_configs(model, 30, seed=3)):
        box = rm.BoxAttachment.grasp(model, q, 2.0 + k * 0.2, (0.2, 0.1))
        q2 = q + 0.05
        fd = -central_diff(lambda y: oracle_potential(model, y, box), q2)
        np.testing.assert_allclose(rm.gravity_torques(model, q2, box), fd, rtol=1e-6, atol=1e-7)


def test_unattached_box_adds_nothing(model):
    q = random_configs(model, 1, seed=4)[0]
    box = rm.BoxAttachment(5.0, 0.2, (0.1, 0.1), attached=False)
    np.testing.assert_array_equal(rm.gravity_torques(model, q, box), rm.gravity_torques(model, q))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=5, max_size=5), st.floats(0.0, 20.0))
def test_cop_is_system_com(qs, weight):
    model = rm.default_model()
    q = np.array(qs)
    box = rm.BoxAttachment.grasp(model, q, weight, (0.25, 0.07))
    assert rm.cop_x(model, q, box) == rm.system_com(model, q, box)[0]
    assert rm.cop_x(model, q, box) == pytest.approx(oracle_com_x(model, q, box), abs=1e-12)


def test_system_com_mass_bookkeeping(model):
    q = np.zeros(model.dof)
    box = rm.BoxAttachment.grasp(model, q, 9.81, (0.3, 0.1))
    _, _, total = rm.system_com(model, q, box)
    assert total == pytest.approx(model.total_mass + 1.0)


def test_wrong_dimension_rejected(model):
    with pytest.raises(DimensionMismatch):
        rm.gravity_torques(model, np.zeros(model.dof + 1))


def test_model_round_trip(tmp_path, model):
    p = tmp_path / "m.json"
    rm.save_model(model, p)
    again = rm.load_model(p)
    assert again == model
    assert again.digest() == model.digest()


def test_model_schema_checked(tmp_path, model):
    d = model.to_dict()
    d["schema_version"] = "robot-model/0"
    p = tmp_path / "m.json"
    p.write_text(json.dumps(d))
    with pytest.raises(SchemaMismatch):
        rm.load_model(p)


def test_model_rejects_inverted_limits(model):
    d = model.to_dict()
    d["joints"][0]["q_min"], d["joints"][0]["q_max"] = 1.0, -1.0
    with pytest.raises(ConfigError):
        rm.RobotModel.from_dict(d)


def test_tau_scale(model):
    half = model.with_tau_scale(0.5)
    np.testing.assert_allclose(half.tau_max, 0.5 * model.tau_max)
    assert half.digest() != model.digest()


def test_hand_contact_capacities(model):
    c = model.hand_contact
    assert c.f_cap == pytest.approx(c.hand_count * c.mu_grip * c.nominal_grip_force)
    assert c.tau_cap == pytest.approx(c.f_cap * c.contact_radius_r_eff)


def test_box_pose_frames_invert():
    pose = rm.BoxPose((0.12, 0.0), 0.15, 0.14, 0.3)
    p = np.array([0.05, 0.07])
    np.testing.assert_allclose(pose.to_box(pose.to_foot(p)), p, atol=1e-15)


def test_clearance_detects_overlap(model):
    q = np.zeros(model.dof)
    inside = rm.BoxPose((-0.05, 0.10), 0.10, 0.10, 0.0)
    far = rm.BoxPose((0.6, 0.0), 0.10, 0.10, 0.0)
    assert rm.collision_clearance(model, q, inside) < 0
    assert rm.collision_clearance(model, q, far) > 0


def test_torque_of_horizontal_forearm(model):
    # fold everything so only the forearm is horizontal: tau_elbow = m g c
    q = np.zeros(model.dof)
    q[-1] = np.pi / 2
    link = model.links[-1]
    tau = rm.gravity_torques(model, q)
    assert tau[-1] == pytest.approx(link.mass * rm.GRAVITY * link.com_offset, rel=1e-12)
    q[-1] = 0.0
    assert rm.gravity_torques(model, q)[-1] == pytest.approx(0.0, abs=1e-15)


def test_box_weighted_mean(model):
    q = np.zeros(model.dof)
    # robot COM at x = 0 when upright; 0.85 kg box at x = 0.1447
    box = rm.BoxAttachment.grasp(model, q, 0.85 * rm.GRAVITY, (0.1447, 0.3))
    expected = 0.85 * 0.1447 / (model.total_mass + 0.85)
    assert rm.cop_x(model, q, box) == pytest.approx(expected, abs=1e-12)


def test_link_lengths_preserved(model):
    for q in random_configs(model, 20, seed=5):
        o = rm.forward_kinematics(model, q).origins
        np.testing.assert_allclose(np.linalg.norm(np.diff(o, axis=0), axis=1), model.lengths,
                                   atol=1e-12)


def chain(lengths, masses=None, offsets=None):
    n = len(lengths)
    masses = masses or [1.0] * n
    offsets = offsets or [0.5 * v for v in lengths]
    links = [rm.Link(v, mm, c) for v, mm, c in zip(lengths, masses, offsets)]
    joints = [rm.JointSpec(-np.pi, np.pi, 10.0) for _ in range(n)]
    return rm.RobotModel(links, joints, (-0.1, 0.1), rm.HandContactModel(2.0, 0.5, 0.02),
                         leg_joints=(), torso_link=0, leg_links=(0, 0))


def test_straight_chain_hand_height():
    m = chain([0.10, 0.10, 0.20, 0.15, 0.10])
    hand = rm.forward_kinematics(m, np.zeros(5)).hand
    assert hand[0] == 0.0
    assert hand[1] == pytest.approx(0.65, abs=1e-12)


def test_single_link_quarter_turn():
    hand = rm.forward_kinematics(chain([0.1]), np.array([np.pi / 2])).hand
    np.testing.assert_allclose(hand, [0.1, 0.0], atol=1e-15)


def test_two_point_masses_com():
    # unit masses at the base (x = 0) and at the second joint (x = 0.1)
    m = chain([0.1, 0.1], offsets=[0.0, 0.0])
    assert rm.system_com(m, np.array([np.pi / 2, 0.0]))[0] == pytest.approx(0.05, abs=1e-15)
