import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relpose import liegroup as lg
from relpose import models as M
from relpose.errors import InvalidArgumentError

from conftest import geometries, random_se3, random_state3


def vel(rid, u, Q=None):
    return M.VelocityInput(rid, 0.0, np.asarray(u, dtype=float), Q)


def boxminus(a: M.RelativeState, b: M.RelativeState):
    return np.concatenate([lg.log_map(lg.inverse(Tb) @ Ta) for Ta, Tb in zip(a.poses, b.poses)])


def fd_process(x, u1, up, dt, h=1e-6):
    """Central differences of the propagated state w.r.t. a right perturbation of x."""
    f0 = M.propagate(x, u1, up, dt)
    J = np.zeros((x.dof, x.dof))
    for i in range(x.dof):
        e = np.zeros(x.dof)
        e[i] = h
        J[:, i] = (boxminus(M.propagate(x.oplus(e), u1, up, dt), f0)
                   - boxminus(M.propagate(x.oplus(-e), u1, up, dt), f0)) / (2 * h)
    return J


def fd_meas(x, geoms, graph, h=1e-6):
    J = np.zeros((len(graph), x.dof))
    for i in range(x.dof):
        e = np.zeros(x.dof)
        e[i] = h
        J[:, i] = (M.range_stack(x.oplus(e), geoms, graph) - M.range_stack(x.oplus(-e), geoms, graph)) / (2 * h)
    return J


def rel_err(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-12)


# ---------------------------------------------------------------- propagation


def test_propagate_identity_with_zero_input(rng):
    x = random_state3(rng, 3)
    z = [vel(p, np.zeros(6)) for p in (1, 2, 3)]
    y = M.propagate(x, z[0], z[1:], 0.02)
    assert np.allclose(y.poses, x.poses, atol=1e-15)


def test_propagate_matches_world_frame_integration(rng):
    """Integrate every robot in a world frame and compare the relative poses."""
    W = [random_se3(rng, 2.0) for _ in range(3)]
    x = M.RelativeState(np.stack([lg.inverse(W[0]) @ W[p] for p in (1, 2)]))
    dt = 0.02
    for _ in range(50):
        u = [rng.normal(size=6) for _ in range(3)]
        W = [Wp @ lg.exp_map(dt * up) for Wp, up in zip(W, u)]
        x = M.propagate(x, vel(1, u[0]), [vel(2, u[1]), vel(3, u[2])], dt)
    truth = np.stack([lg.inverse(W[0]) @ W[p] for p in (1, 2)])
    assert np.allclose(x.poses, truth, atol=1e-10)


def test_propagate_rejects_bad_dt(rng):
    x = random_state3(rng, 2)
    with pytest.raises(InvalidArgumentError):
        M.propagate(x, vel(1, np.zeros(6)), [vel(2, np.zeros(6))], 0.0)


def test_propagate_rejects_wrong_input_count(rng):
    x = random_state3(rng, 3)
    with pytest.raises(InvalidArgumentError):
        M.propagate(x, vel(1, np.zeros(6)), [vel(2, np.zeros(6))], 0.02)


def test_process_jacobian_matches_finite_differences(rng):
    for _ in range(100):
        x = random_state3(rng, 3)
        u = [rng.normal(size=6) for _ in range(3)]
        dt = rng.uniform(0.01, 0.1)
        A = M.process_jacobian([vel(2, u[1]), vel(3, u[2])], dt)
        J = fd_process(x, vel(1, u[0]), [vel(2, u[1]), vel(3, u[2])], dt)
        assert rel_err(A, J) < 1e-5


def test_process_jacobian_planar(rng):
    x = M.RelativeState(np.stack([lg.exp_map(rng.normal(size=3)) for _ in range(2)]))
    u = [rng.normal(size=3) for _ in range(3)]
    A = M.process_jacobian([vel(2, u[1]), vel(3, u[2])], 0.05)
    J = fd_process(x, vel(1, u[0]), [vel(2, u[1]), vel(3, u[2])], 0.05)
    assert rel_err(A, J) < 1e-5


def test_input_jacobians_match_finite_differences(rng):
    h = 1e-6
    for _ in range(20):
        x = random_state3(rng, 3)
        u = [rng.normal(size=6) for _ in range(3)]
        dt = 0.05
        L1, Lp = M.input_jacobians(x, vel(1, u[0]), [vel(2, u[1]), vel(3, u[2])], dt)
        for robot, L in enumerate([L1] + Lp):
            J = np.zeros_like(L)
            for i in range(6):
                up = [uu.copy() for uu in u]
                um = [uu.copy() for uu in u]
                up[robot][i] += h
                um[robot][i] -= h
                fp = M.propagate(x, vel(1, up[0]), [vel(2, up[1]), vel(3, up[2])], dt)
                fm = M.propagate(x, vel(1, um[0]), [vel(2, um[1]), vel(3, um[2])], dt)
                f0 = M.propagate(x, vel(1, u[0]), [vel(2, u[1]), vel(3, u[2])], dt)
                J[:, i] = (boxminus(fp, f0) - boxminus(fm, f0)) / (2 * h)
            assert rel_err(L, J) < 1e-5


def test_process_noise_matches_sampled_covariance(rng):
    """Second moment of log-errors under small input noise approaches L Q L^T."""
    x = random_state3(rng, 2)
    u = [rng.normal(size=6) for _ in range(2)]
    Q = np.diag([1e-4] * 3 + [4e-4] * 3)
    dt = 0.05
    Qs = M.process_noise(x, vel(1, u[0], Q), [vel(2, u[1], Q)], dt)
    f0 = M.propagate(x, vel(1, u[0]), [vel(2, u[1])], dt)
    S = np.linalg.cholesky(Q)
    d = []
    for _ in range(4000):
        n1, n2 = S @ rng.normal(size=6), S @ rng.normal(size=6)
        f = M.propagate(x, vel(1, u[0] + n1), [vel(2, u[1] + n2)], dt)
        d.append(boxminus(f, f0))
    C = np.cov(np.array(d).T)
    assert np.allclose(np.sqrt(np.diag(C)), np.sqrt(np.diag(Qs)), rtol=0.05)


def test_propagation_is_exactly_linear_in_right_perturbation(rng):
    """exp(-dt u1) T exp(d) exp(dt up) = f(T) exp(Ad(exp(-dt up)) d): no second-order residual."""
    x = random_state3(rng, 3)
    u = [rng.normal(size=6) for _ in range(3)]
    up = [vel(2, u[1]), vel(3, u[2])]
    A = M.process_jacobian(up, 0.1)
    f0 = M.propagate(x, vel(1, u[0]), up, 0.1)
    for s in (1e-1, 1e-2, 1e-3):
        d = s * rng.normal(size=x.dof)
        f = M.propagate(x.oplus(d), vel(1, u[0]), up, 0.1)
        assert np.linalg.norm(boxminus(f, f0) - A @ d) < 1e-10


def test_measurement_linearization_error_is_second_order(rng):
    geoms = geometries(3)
    graph = M.inter_robot_graph(geoms, 0.1)
    x = random_state3(rng, 3)
    H = M.meas_jacobian(x, geoms, graph)
    y0 = M.range_stack(x, geoms, graph)
    d = rng.normal(size=x.dof)
    res = [np.linalg.norm(M.range_stack(x.oplus(s * d), geoms, graph) - y0 - H @ (s * d))
           for s in (1e-2, 5e-3, 2.5e-3)]
    order = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert np.all(np.abs(order - 2.0) < 0.2)


# ---------------------------------------------------------------- ranges


def test_ranges_match_world_frame_oracle(rng):
    geoms = geometries(3)
    graph = M.inter_robot_graph(geoms, 0.1)
    W = [random_se3(rng, 3.0) for _ in range(3)]
    x = M.RelativeState(np.stack([lg.inverse(W[0]) @ W[p] for p in (1, 2)]))
    world = {}
    for Wp, g in zip(W, geoms):
        for tag, off in g.tags.items():
            world[tag] = (Wp @ np.r_[off, 1.0])[:3]
    expect = [np.linalg.norm(world[a] - world[b]) for a, b in graph.edges]
    assert np.allclose(M.range_stack(x, geoms, graph), expect, atol=1e-12)


def test_range_three_four_five():
    g = [M.RobotGeometry(1, {1: [0, 0, 0], 2: [1, 0, 0]}), M.RobotGeometry(2, {3: [0, 0, 0], 4: [1, 0, 0]})]
    x = M.RelativeState(lg.make_pose(np.eye(3), [3.0, 4.0, 0.0]))
    assert M.range_one(x, g, (1, 3)) == pytest.approx(5.0, abs=1e-15)


def test_ranges_invariant_to_reference_choice(rng):
    """Ranges from {T_1p} equal ranges from the state re-expressed in robot 2's frame."""
    geoms = geometries(3)
    graph = M.inter_robot_graph(geoms, 0.1)
    x = random_state3(rng, 3)
    T12, T13 = x.poses
    T21 = lg.inverse(T12)
    x2 = M.RelativeState(np.stack([T21, T21 @ T13]))
    g2 = [geoms[1], geoms[0], geoms[2]]
    y1 = M.range_stack(x, geoms, graph)
    y2 = M.range_stack(x2, g2, graph)
    assert np.allclose(y1, y2, atol=1e-10)


def test_meas_jacobian_matches_finite_differences(rng):
    geoms = geometries(3)
    graph = M.inter_robot_graph(geoms, 0.1)
    for _ in range(100):
        x = random_state3(rng, 3)
        H = M.meas_jacobian(x, geoms, graph)
        assert rel_err(H, fd_meas(x, geoms, graph)) < 1e-5


def test_meas_jacobian_planar(rng):
    geoms = geometries(3, dim=2)
    graph = M.inter_robot_graph(geoms, 0.1)
    x = M.RelativeState(np.stack([lg.exp_map(np.r_[rng.uniform(-3, 3), rng.uniform(-3, 3, 2)])
                                  for _ in range(2)]))
    H = M.meas_jacobian(x, geoms, graph)
    assert rel_err(H, fd_meas(x, geoms, graph)) < 1e-5


def test_intra_robot_edge_gives_zero_row(rng):
    geoms = geometries(2)
    graph = M.MeasurementGraph(((1, 2), (1, 3)), 0.1)
    H = M.meas_jacobian(random_state3(rng, 2), geoms, graph)
    assert np.all(H[0] == 0.0)
    assert np.any(H[1] != 0.0)


def test_meas_jacobian_block_sparsity(rng):
    geoms = geometries(4)
    graph = M.inter_robot_graph(geoms, 0.1)
    x = random_state3(rng, 4)
    H = M.meas_jacobian(x, geoms, graph)
    owner = {t: g.robot_id for g in geoms for t in g.tags}
    for row, (a, b) in enumerate(graph.edges):
        touched = {owner[a] - 2, owner[b] - 2} - {-1}
        for blk in range(3):
            if blk not in touched:
                assert np.all(H[row, 6 * blk:6 * blk + 6] == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_range_symmetric_and_nonnegative(seed):
    r = np.random.default_rng(seed)
    geoms = geometries(3)
    x = random_state3(r, 3)
    for a, b in [(1, 3), (2, 5), (4, 6)]:
        yab = M.range_one(x, geoms, (a, b))
        assert yab >= 0.0
        assert yab == pytest.approx(M.range_one(x, geoms, (b, a)), abs=1e-15)


def test_graph_has_twelve_edges_for_three_robots():
    assert len(M.inter_robot_graph(geometries(3), 0.1)) == 12


def test_geometry_rejects_single_tag():
    with pytest.raises(InvalidArgumentError):
        M.RobotGeometry(1, {1: [0.0, 0.0, 0.0]})


def test_graph_rejects_nonpositive_sigma():
    with pytest.raises(InvalidArgumentError):
        M.MeasurementGraph(((1, 3),), 0.0)
