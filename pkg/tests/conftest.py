from __future__ import annotations

import numpy as np
import pytest

from gsinpaint.scene import CameraPose, Gaussians
from gsinpaint.synth import fixture_spec, generate


def axis_pose(width=64, height=64, fx=60.0, fy=None) -> CameraPose:
    """Camera at the origin looking down +z (identity extrinsics)."""
    return CameraPose(np.eye(3), np.zeros(3), fx, fx if fy is None else fy, (width - 1) / 2,
                      (height - 1) / 2, width, height)


def random_pose(rng, width=64, height=64, target=(0.0, 0.0, 0.0), radius=(2.5, 4.0)) -> CameraPose:
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    eye = np.asarray(target) + d * rng.uniform(*radius)
    up = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    return CameraPose.look_at(eye, target, up, rng.uniform(50, 80), width, height)


def random_gaussians(rng, n, spread=0.8, scale=(0.05, 0.25), opacity=(0.2, 0.95)) -> Gaussians:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Gaussians(
        positions=rng.uniform(-spread, spread, size=(n, 3)),
        scales=rng.uniform(*scale, size=(n, 3)),
        rotations=q,
        opacities=rng.uniform(*opacity, size=n),
        colors=rng.uniform(0, 1, size=(n, 3)),
        identities=rng.normal(size=(n, 16)),
    )


@pytest.fixture(scope="session")
def ring8():
    return generate(fixture_spec("ring8"))


@pytest.fixture(scope="session")
def pair90():
    return generate(fixture_spec("pair90"))


@pytest.fixture(scope="session")
def small():
    return generate(fixture_spec("small"))


# one line per acceptance criterion, printed after the run whatever the outcome
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
