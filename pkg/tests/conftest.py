import numpy as np
import pytest

from fcop.geometry import Correspondence, CorrespondenceSet, ImagePoint

ACCEPTANCE_RESULTS: list[str] = []


def rodrigues(axis, angle_rad):
    """Rotation matrix from an axis and angle, written out independently of the package."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1 - np.cos(angle_rad)) * K @ K


def random_rot(rng):
    return rodrigues(rng.standard_normal(3), rng.uniform(0, np.pi))


def forward_project(f, s, R, t, p):
    """Ground-truth correspondences: X = s R p + t, x = f X_xy / X_z, d = X_z."""
    X = s * np.asarray(p) @ np.asarray(R).T + np.asarray(t)
    return f * X[:, :2] / X[:, 2:3], X[:, 2]


def make_set(f, s, R, t, p):
    x, d = forward_project(f, s, R, t, p)
    return CorrespondenceSet(x, d, p)


def make_list(f, s, R, t, p):
    x, d = forward_project(f, s, R, t, p)
    return [Correspondence(ImagePoint(*xi), di, tuple(pi)) for xi, di, pi in zip(x, d, p)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def exact_object(rng):
    """100 noise-free correspondences of one object seen with f = 800."""
    p = rng.uniform(-1, 1, (100, 3))
    R = random_rot(rng)
    t = np.array([0.3, -0.2, 4.5])
    return {"f": 800.0, "s": 0.6, "R": R, "t": t, "p": p, "set": make_set(800.0, 0.6, R, t, p)}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
