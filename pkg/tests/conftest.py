import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from surfelba.geometry import Pose, so3_exp

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_pose(rng, t_scale=1.0, max_angle=np.pi * 0.95):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return Pose(so3_exp(axis * rng.uniform(0, max_angle)), rng.standard_normal(3) * t_scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def plate_world():
    """Seven separated flat plates; every kd-tree leaf lies on exactly one plane."""
    from surfelba.geometry import so3_exp

    g = np.arange(-0.5, 0.5, 0.05) + 0.025
    U, V = [a.ravel() for a in np.meshgrid(g, g)]
    layout = [([3, 0, 0], [0, 0, 0]), ([-3, 0, 0], [0, 0, 0]), ([0, 3, 0], [0, 0, np.pi / 2]),
              ([0, 0, -2], [0, np.pi / 2, 0]), ([0, 0, 2], [0, np.pi / 2, 0]),
              ([2, 2, 1], [0.3, 0.2, 0.9]), ([-2, 2, -1], [-0.4, 0.5, 0.1])]
    local = np.stack([np.zeros_like(U), U, V], 1)
    return np.vstack([local @ so3_exp(rv).T + np.array(c, float) for c, rv in layout])


def plate_scans(n=4, seed=0):
    """Noiseless scans of the plate world and their exact poses."""
    from surfelba.cloud_io import Cloud, Trajectory
    from surfelba.geometry import Pose, so3_exp

    W = plate_world()
    rng = np.random.default_rng(seed)
    poses = [Pose.identity()] + [
        Pose(so3_exp(rng.normal(0, 0.1, 3)), rng.normal(0, 0.3, 3)) for _ in range(n - 1)
    ]
    clouds = [Cloud((W - p.translation) @ p.rotation, scan_id=k) for k, p in enumerate(poses)]
    return clouds, Trajectory(0.1 * np.arange(n), poses)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Keep one PASS/FAIL line per acceptance criterion for the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
