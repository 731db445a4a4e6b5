import dataclasses
import filecmp
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liftfeas import robot as rm
from liftfeas import sim
from liftfeas import trajopt as to
from liftfeas.errors import (ConfigError, CopOutsidePlate, GripOffBox, InfeasiblePose,
                             NotGripping, NotLifted, SchemaMismatch, ZeroMass)
from liftfeas.sim import LiftOutcome as LO

CFG = sim.IdentificationConfig()


def world(mass, com, grip=None, **kw):
    return sim.World(sim.BoxTruth(mass, com), rm.default_model().hand_contact,
                     initial_grip_x=grip, **kw)


def leaning_posture(model, w, grip_x, com_min):
    """A gripping posture with the robot COM pushed forward to at least ``com_min``."""
    target = w.box_params(grip_x).grip_point(grip_x)
    return sim._solve_posture(model, w, grip_x, to._initial_guesses(model, target),
                              [(-to.LEN_SCALE, 0, com_min)])


# --- grip oracle and plate -------------------------------------------------------

def test_grip_oracle_examples():
    slippery = rm.HandContactModel(3.75, 0.8, 0.025)  # f_cap = 6 N
    assert sim.grip_oracle(sim.BoxTruth(8.3 / 9.81, 0.07), slippery, 0.07) is LO.SLIP
    c = rm.default_model().hand_contact
    assert sim.grip_oracle(sim.BoxTruth(0.85, 0.105), c, 0.05) is LO.ROTATE_AWAY
    assert sim.grip_oracle(sim.BoxTruth(0.85, 0.105), c, 0.15) is LO.ROTATE_TOWARD
    assert sim.grip_oracle(sim.BoxTruth(0.85, 0.105), c, 0.08) is LO.LIFTED


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.0, 0.15), st.floats(0.0, 0.15), st.floats(1.0, 10.0))
def test_grip_oracle_trichotomy(mass, com, grip, grip_force):
    c = rm.HandContactModel(grip_force, 0.8, 0.025)
    truth = sim.BoxTruth(mass, com)
    out = sim.grip_oracle(truth, c, grip)
    lifted = c.f_cap >= truth.weight and truth.weight * abs(com - grip) <= c.tau_cap
    assert (out is LO.LIFTED) == lifted
    if out is LO.ROTATE_AWAY:
        assert com > grip
    if out is LO.ROTATE_TOWARD:
        assert com < grip


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 200.0), st.floats(-0.08, 0.12))
def test_load_cells_reconstruct_total_and_cop(total, cop):
    cells = sim.load_cell_frame(total, cop)
    n, c = sim.plate_readout(cells)
    assert n == pytest.approx(total, abs=1e-9)
    if total > 1e-6:
        assert c == pytest.approx(cop, abs=1e-9)


def test_cop_off_plate():
    with pytest.raises(CopOutsidePlate):
        sim.load_cell_frame(50.0, 0.2)


# --- one attempt -------------------------------------------------------------------

def test_robust_grip_lifts(model):
    w = world(0.5, 0.075)
    p = sim.lifting_posture(model, w, 0.075)
    res = sim.simulate_attempt(w, model, p, CFG, 0)
    assert res.outcome is LO.LIFTED
    assert len(res.frames) == CFG.ramp_frames + CFG.lift_frames + CFG.steady_window
    steady = res.frames[-CFG.steady_window:]
    assert all(f.box_height_h >= CFG.lift_height_threshold for f in steady)
    assert all(abs(f.box_theta) <= CFG.rotation_threshold for f in steady)
    assert sim.classify(res.frames, CFG) is LO.LIFTED


def test_slip_keeps_box_down(model):
    slippery = dataclasses.replace(model.hand_contact, mu_grip=0.2)
    w = sim.World(sim.BoxTruth(0.5, 0.075), slippery)
    res = sim.simulate_attempt(w, model, sim.lifting_posture(model, w, 0.075), CFG, 0)
    assert all(f.box_height_h == 0.0 for f in res.frames)
    assert sim.classify(res.frames, CFG) is LO.SLIP


def test_rotation_direction(model):
    w = world(0.85, 0.105)
    res = sim.simulate_attempt(w, model, sim.lifting_posture(model, w, 0.05), CFG, 0)
    assert sim.classify(res.frames, CFG) is LO.ROTATE_AWAY
    assert res.frames[-1].box_theta > CFG.rotation_threshold


def test_forward_heavy_posture_trips_stability(model):
    cfg = sim.IdentificationConfig(torque_threshold=tuple(10 * model.tau_max))
    w = world(0.9, 0.12)
    p = leaning_posture(model, w, 0.12, 0.07)
    res = sim.simulate_attempt(w, model, p, cfg, 0)
    assert res.outcome is LO.STABILITY_ABORT
    heel, toe = model.support_polygon
    # statics oracle: robot moment plus the box weight at its COM
    att = rm.BoxAttachment.grasp(model, p.q, w.box.weight, (w.near_x + 0.12, 0.07))
    assert rm.cop_x(model, p.q, att) > toe - cfg.stability_threshold
    assert res.frames[-1].cop_x_measured > toe - cfg.stability_threshold


def test_heavy_far_box_trips_hip_torque(model):
    w = world(1.2, 0.15)
    res = sim.simulate_attempt(w, model, sim.lifting_posture(model, w, 0.15), CFG, 0)
    assert res.outcome is LO.TORQUE_ABORT
    assert model.joints[res.abort_joint].name == "hip"
    assert abs(res.frames[-1].joint_torque_readings[res.abort_joint]) > 0.9 * model.tau_max[2]


def test_hand_must_be_on_grip_point(model):
    w = world(0.5, 0.075)
    p = sim.lifting_posture(model, w, 0.075)
    with pytest.raises(NotGripping):
        sim.simulate_attempt(w, model, sim.Posture(p.q, 0.10), CFG, 0)


# --- estimators --------------------------------------------------------------------

def test_weight_is_plate_minus_robot(model):
    w = sim.load_world(sim.shipped_world("three_attempts"))
    r = sim.run_identification(w, model, CFG, 0)
    # 0.85 kg under g = 9.81
    assert sim.estimate_weight(r.attempts[-1].frames, model) == pytest.approx(8.3385, abs=1e-9)


def test_weight_needs_lift(model):
    slippery = dataclasses.replace(model.hand_contact, mu_grip=0.2)
    w = sim.World(sim.BoxTruth(0.5, 0.075), slippery)
    res = sim.simulate_attempt(w, model, sim.lifting_posture(model, w, 0.075), CFG, 0)
    with pytest.raises(NotLifted):
        sim.estimate_weight(res.frames, model)


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.05, 0.1), st.floats(0.1, 2.0), st.floats(0.0, 0.3))
def test_com_from_cop_inverts_weighted_mean(robot_com, box_mass, box_com):
    robot_mass = 5.4
    cop = (robot_mass * robot_com + box_mass * box_com) / (robot_mass + box_mass)
    assert sim.com_from_cop(cop, robot_mass, robot_com, box_mass) == pytest.approx(box_com, abs=1e-9)


def test_zero_mass_com():
    with pytest.raises(ZeroMass):
        sim.com_from_cop(0.02, 5.4, 0.02, 0.0)


@pytest.mark.parametrize("mass,com", [(0.2, 0.03), (0.7, 0.06), (0.6, 0.09), (0.5, 0.12)])
def test_com_estimate_matches_truth(model, mass, com):
    w = world(mass, com)
    p = sim.lifting_posture(model, w, com)
    res = sim.simulate_attempt(w, model, p, CFG, 0)
    assert res.outcome is LO.LIFTED
    assert sim.estimate_com(res.frames, model, p.q) == pytest.approx(com, abs=1e-9)


def test_noise_averages_down(model):
    w = world(0.5, 0.075)
    p = sim.lifting_posture(model, w, 0.075)
    noisy = sim.IdentificationConfig(noise=sim.NoiseSpec(load_cell=0.1), steady_window=100)
    errs = []
    for seed in range(100):
        res = sim.simulate_attempt(w, model, p, noisy, seed)
        errs.append(sim.estimate_weight(res.frames, model, cfg=noisy) - w.box.weight)
    # four cells of sigma 0.1 summed, averaged over 100 frames
    assert np.std(errs) == pytest.approx(0.02, rel=0.25)
    assert abs(np.mean(errs)) < 0.01


def test_same_seed_same_frames(model):
    w = world(0.5, 0.075)
    p = sim.lifting_posture(model, w, 0.075)
    noisy = sim.IdentificationConfig(noise=sim.NoiseSpec(0.1, 0.001, 0.01))
    a = sim.simulate_attempt(w, model, p, noisy, 7).frames
    b = sim.simulate_attempt(w, model, p, noisy, 7).frames
    c = sim.simulate_attempt(w, model, p, noisy, 8).frames
    assert a == b and a != c


# --- posture adjustments -------------------------------------------------------------

def test_stability_adjustment_moves_com_back(model):
    w = world(0.9, 0.12)
    p = leaning_posture(model, w, 0.12, 0.07)
    hand = rm.forward_kinematics(model, p.q).hand
    coms = [rm.system_com(model, p.q)[0]]
    with pytest.raises(InfeasiblePose):
        for _ in range(20):
            p = sim.adjust_for_stability(model, w, p, 0.01)
            coms.append(rm.system_com(model, p.q)[0])
            assert np.linalg.norm(rm.forward_kinematics(model, p.q).hand - hand) <= 1e-4
            assert p.grip_x == 0.12
    assert len(coms) >= 3
    assert np.all(np.diff(coms) <= -0.01 + 1e-6)


def test_stability_adjustment_needs_room(model):
    w = world(0.5, 0.075)
    p = sim.lifting_posture(model, w, 0.075)
    with pytest.raises(InfeasiblePose):
        sim.adjust_for_stability(model, w, p, 0.2)


def test_torque_adjustment_reduces_robot_only_torque(model):
    w = world(0.9, 0.12)
    p = sim.lifting_posture(model, w, 0.12)
    hip = model.joint_index("hip")
    q = sim.adjust_for_torque(model, w, p, hip, 0.05)
    before = rm.gravity_torques(model, p.q)[hip]
    after = rm.gravity_torques(model, q.q)[hip]
    assert before - after >= 0.05 - 1e-6
    hand = rm.forward_kinematics(model, p.q).hand
    assert np.linalg.norm(rm.forward_kinematics(model, q.q).hand - hand) <= 1e-4
    with pytest.raises(InfeasiblePose):
        sim.adjust_for_torque(model, w, p, hip, 50.0)


def test_grip_adjustment(model):
    w = world(0.85, 0.105)
    p = sim.lifting_posture(model, w, 0.05)
    further = sim.adjust_grip(model, w, p, sim.GripDirection.FURTHER, 0.03)
    assert further.grip_x == pytest.approx(0.08)
    grip = w.box_params(0.08).grip_point(0.08)
    assert np.linalg.norm(rm.forward_kinematics(model, further.q).hand - grip) <= 1e-4
    with pytest.raises(GripOffBox):
        sim.adjust_grip(model, w, sim.lifting_posture(model, w, 0.02), sim.GripDirection.CLOSER, 0.03)
    with pytest.raises(GripOffBox):
        sim.adjust_grip(model, w, sim.lifting_posture(model, w, 0.13), sim.GripDirection.FURTHER, 0.03)


# --- identification loop ---------------------------------------------------------------

def test_three_attempts_scenario(model):
    w = sim.load_world(sim.shipped_world("three_attempts"))
    assert w.box.mass == 0.85
    r = sim.run_identification(w, model, CFG, 0)
    assert r.outcomes == [LO.ROTATE_AWAY, LO.TORQUE_ABORT, LO.LIFTED]
    assert model.joints[r.attempts[1].max_torque_joint].name == "hip"
    assert r.estimate.weight == pytest.approx(w.box.weight, abs=1e-9)
    assert r.estimate.com_x == pytest.approx(w.box.com_x_box, abs=1e-9)


def test_slip_world(model):
    w = sim.load_world(sim.shipped_world("slip"))
    assert w.box.weight > w.contact.f_cap
    r = sim.run_identification(w, model, CFG, 0)
    assert r.estimate is None and r.flag.reason == "slip"


def test_empty_box(model):
    r = sim.run_identification(sim.load_world(sim.shipped_world("empty")), model, CFG, 0)
    assert r.estimate.weight == 0.0 and r.estimate.gripping_distance == pytest.approx(0.0, abs=1e-9)


def test_attempt_logs_deterministic(model, tmp_path):
    w = sim.load_world(sim.shipped_world("three_attempts"))
    noisy = sim.IdentificationConfig(noise=sim.NoiseSpec(0.05, 0.0005, 0.01))
    for name in ("a", "b"):
        r = sim.run_identification(w, model, noisy, 3)
        sim.write_attempt_summary(r.attempts, model, tmp_path / f"{name}_sum.csv")
        sim.write_frame_log(r.attempts, model, tmp_path / f"{name}_frames.csv")
    assert filecmp.cmp(tmp_path / "a_sum.csv", tmp_path / "b_sum.csv", shallow=False)
    assert filecmp.cmp(tmp_path / "a_frames.csv", tmp_path / "b_frames.csv", shallow=False)


def test_world_round_trip(tmp_path):
    import json
    w = world(0.3, 0.02, 0.12, noise=sim.NoiseSpec(0.1))
    p = tmp_path / "w.json"
    p.write_text(json.dumps(w.to_dict()))
    assert sim.load_world(p) == w
    p.write_text(json.dumps({**w.to_dict(), "schema_version": "world/0"}))
    with pytest.raises(SchemaMismatch):
        sim.load_world(p)


def test_config_validation():
    with pytest.raises(ConfigError):
        sim.IdentificationConfig(max_attempts=0)
    with pytest.raises(ConfigError):
        sim.IdentificationConfig(lift_height=0.005)
    with pytest.raises(ConfigError):
        sim.BoxTruth(0.5, 0.2)
    assert math.isclose(CFG.rotation_threshold, math.radians(5))
