"""Shared fixtures and independent oracles.

The oracles below recompute kinematics and potential energy from the raw
link table with plain loops, so they share no code with the package.
"""
import math

import numpy as np
import pytest

from liftfeas import robot as rm


@pytest.fixture(scope="session")
def model():
    return rm.default_model()


def random_configs(model, n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(model.q_min, model.q_max, size=(n, model.dof))


def oracle_points(model, q):
    """Joint origins and link COMs by walking the chain one link at a time."""
    x, z, phi = 0.0, model.base_height, 0.0
    origins, coms = [(x, z)], []
    for link, qj in zip(model.links, q):
        phi += qj
        sx, cz = math.sin(phi), math.cos(phi)
        coms.append((x + link.com_offset * sx, z + link.com_offset * cz))
        x, z = x + link.length * sx, z + link.length * cz
        origins.append((x, z))
    return origins, coms, phi


def oracle_box_com(box, hand, hand_angle):
    """Carried box COM: its offset from the hand turns clockwise with the hand."""
    dx, dz = box.com_x - box.grip_point[0], box.com_z - box.grip_point[1]
    d = hand_angle - box.hand_angle
    return (hand[0] + dx * math.cos(d) + dz * math.sin(d),
            hand[1] - dx * math.sin(d) + dz * math.cos(d))


def oracle_potential(model, q, box=None):
    origins, coms, phi = oracle_points(model, q)
    u = sum(link.mass * rm.GRAVITY * c[1] for link, c in zip(model.links, coms))
    if box is not None and box.attached:
        u += box.weight_G_box * oracle_box_com(box, origins[-1], phi)[1]
    return u


def oracle_com_x(model, q, box=None):
    origins, coms, phi = oracle_points(model, q)
    m = [link.mass for link in model.links]
    mx = sum(mi * c[0] for mi, c in zip(m, coms))
    total = sum(m)
    if box is not None and box.attached:
        mb = box.weight_G_box / rm.GRAVITY
        mx += mb * oracle_box_com(box, origins[-1], phi)[0]
        total += mb
    return mx / total


# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE = {}


def record(criterion: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n:2d}. {title}: {detail}")
