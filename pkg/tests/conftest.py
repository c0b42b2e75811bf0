import numpy as np
import pytest

from relpose import liegroup as lg
from relpose.models import RelativeState, RobotGeometry, inter_robot_graph

TAGS = ((0.17, 0.17, 0.0), (0.17, -0.17, 0.0))


def geometries(n, dim=3, tags=TAGS):
    """Robot p carries tags 2p-1, 2p at the same body offsets."""
    return [RobotGeometry(p + 1, {2 * p + 1: np.array(tags[0][:dim]), 2 * p + 2: np.array(tags[1][:dim])})
            for p in range(n)]


def planar_scene(rng, n, dist=(1.0, 5.0)):
    """Random SE(2) relative poses with every robot 1-5 m from robot 1."""
    poses = []
    for _ in range(n - 1):
        r = rng.uniform(*dist)
        a = rng.uniform(-np.pi, np.pi)
        poses.append(lg.make_pose(lg.rot2(rng.uniform(-np.pi, np.pi)), r * np.array([np.cos(a), np.sin(a)])))
    return RelativeState(np.stack(poses))


def random_se3(rng, scale=1.0, max_angle=2.5):
    w = rng.normal(size=3)
    w *= rng.uniform(0.0, max_angle) / np.linalg.norm(w)
    return lg.exp_map(np.r_[w, scale * rng.normal(size=3)])


def random_state3(rng, n, scale=2.0):
    return RelativeState(np.stack([random_se3(rng, scale) for _ in range(n - 1)]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def eight_mode_scene():
    """Three-robot planar scene whose noiseless ranges give 16 geometric and 8 final modes."""
    g = geometries(3, dim=2)
    graph = inter_robot_graph(g, 0.1)
    r = np.random.default_rng(3)
    T2 = lg.exp_map(np.r_[r.uniform(-3, 3), r.uniform(-3, 3, 2)])
    T3 = lg.exp_map(np.r_[r.uniform(-3, 3), r.uniform(-3, 3, 2)])
    return g, graph, RelativeState(np.stack([T2, T3]))


def pytest_terminal_summary(terminalreporter):
    import test_acceptance
    if test_acceptance.LINES:
        terminalreporter.section("acceptance")
        for line in sorted(test_acceptance.LINES):
            terminalreporter.write_line(line)
