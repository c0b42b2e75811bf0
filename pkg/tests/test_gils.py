import functools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relpose import gils
from relpose import liegroup as lg
from relpose import models as M
from relpose.errors import DegenerateGeometryError, InvalidArgumentError, NoSolutionError

from conftest import geometries, planar_scene


def averaged(y, count=200):
    return gils.AveragedRanges(np.asarray(y, dtype=float), count, (0.0, 1.0))


def test_average_ranges_mean():
    snaps = [M.RangeSnapshot(0.0, np.array([1.0, 2.0])), M.RangeSnapshot(0.02, np.array([3.0, 6.0]))]
    avg = gils.average_ranges(snaps)
    assert np.allclose(avg.ybar, [2.0, 4.0])
    assert avg.count == 2


def test_average_ranges_empty():
    with pytest.raises(InvalidArgumentError):
        gils.average_ranges([])


def test_residual_dof_for_three_robots():
    g = geometries(3, dim=2)
    assert gils.residual_dof(M.inter_robot_graph(g, 0.1), 3) == 11


def test_sixteen_geometric_modes_reduce_to_eight(eight_mode_scene):
    g, graph, truth = eight_mode_scene
    res = gils.initialize(averaged(M.range_stack(truth, g, graph)), g, graph)
    assert res.n_geometric == 16
    assert len(res.mixture) == 8
    assert np.allclose(res.mixture.weights, 0.125)
    err = []
    for c in res.candidates:
        d = [np.linalg.norm(lg.log_map(lg.inverse(T) @ Tc)) for T, Tc in zip(truth.poses, c.state.poses)]
        err.append(max(d))
    assert min(err) < 1e-6


def test_single_robot_pair_gives_at_most_four(rng):
    g = geometries(2, dim=2)
    graph = M.inter_robot_graph(g, 0.1)
    x = planar_scene(rng, 2)
    res = gils.initialize(averaged(M.range_stack(x, g, graph)), g, graph)
    assert 1 <= len(res.mixture) <= 4
    assert res.mixture.weights.sum() == pytest.approx(1.0, abs=1e-15)


def test_refine_from_truth_is_a_fixed_point(rng):
    g = geometries(3, dim=2)
    graph = M.inter_robot_graph(g, 0.1)
    x = planar_scene(rng, 3)
    res = gils.refine_mode(x, M.range_stack(x, g, graph), g, graph)
    assert res.converged
    assert res.iterations == 0
    assert np.allclose(res.state.poses, x.poses, atol=1e-14)


def test_refine_converges_from_nearby_start(rng):
    g = geometries(3, dim=2)
    graph = M.inter_robot_graph(g, 0.1)
    x = planar_scene(rng, 3)
    x0 = x.oplus(0.05 * rng.normal(size=x.dof))
    res = gils.refine_mode(x0, M.range_stack(x, g, graph), g, graph)
    assert res.converged
    assert np.allclose(res.state.poses, x.poses, atol=1e-8)


def test_gauss_newton_cost_never_increases(rng):
    """Capping the iteration count traces the accepted-iterate costs."""
    g = geometries(3, dim=2)
    graph = M.inter_robot_graph(g, 0.1)
    for _ in range(10):
        x = planar_scene(rng, 3)
        y = M.range_stack(x, g, graph) + 0.01 * rng.normal(size=len(graph))
        x0 = x.oplus(0.3 * rng.normal(size=x.dof))
        costs = []
        for k in range(0, 12):
            try:
                costs.append(gils.refine_mode(x0, y, g, graph, gils.GilsOptions(max_iter=k)).cost)
            except DegenerateGeometryError:
                break
        assert np.all(np.diff(costs) <= 1e-12 * costs[0])


def test_collinear_start_is_rank_deficient():
    """Target tags on the reference tag line: every gradient is parallel."""
    g = geometries(2, dim=2)
    graph = M.inter_robot_graph(g, 0.1)
    x = M.RelativeState(lg.make_pose(lg.rot2(0.0), [0.0, 2.0])[None])
    with pytest.raises(DegenerateGeometryError):
        gils.refine_mode(x, M.range_stack(x, g, graph) + 0.01, g, graph)


def test_sigma2_is_mean_square_over_dof(rng):
    g = geometries(3, dim=2)
    graph = M.inter_robot_graph(g, 0.1)
    x = planar_scene(rng, 3)
    y = M.range_stack(x, g, graph) + 0.01 * rng.normal(size=12)
    P, s2 = gils.mode_covariance(x, y, g, graph)
    e = M.range_stack(x, g, graph) - y
    assert s2 == pytest.approx(e @ e / 11.0)
    H = M.meas_jacobian(x, g, graph)
    assert np.allclose(P, s2 * np.linalg.inv(H.T @ H))


@functools.lru_cache(maxsize=None)
def _spread_ratio(seed, redraws=200):
    """Predicted / sampled variance of the position coordinates for one scene."""
    r = np.random.default_rng(seed)
    g = geometries(3, dim=2)
    graph = M.inter_robot_graph(g, 0.1)
    x = planar_scene(r, 3)
    y0 = M.range_stack(x, g, graph)
    errs, Ps = [], []
    for _ in range(redraws):
        y = y0 + 0.1 / np.sqrt(200) * r.normal(size=12)
        res = gils.refine_mode(x, y, g, graph)
        P, _ = gils.mode_covariance(res.state, y, g, graph)
        errs.append(np.concatenate([lg.log_map(lg.inverse(T) @ Te) for T, Te in zip(x.poses, res.state.poses)]))
        Ps.append(P)
    pos = [1, 2, 4, 5]
    return np.diag(np.mean(Ps, axis=0))[pos] / np.diag(np.cov(np.array(errs).T))[pos]


def test_covariance_matches_monte_carlo_spread():
    """Position variances within a factor two of the spread of refined estimates, pooled over scenes."""
    ratio = np.mean([_spread_ratio(seed) for seed in range(8)], axis=0)
    assert np.all((ratio > 0.5) & (ratio < 2.0))


def test_residual_scale_bias_is_dof_ratio():
    """e^T e has |E| - dim(x) = 6 degrees of freedom but is divided by 11."""
    ratio = np.mean([_spread_ratio(seed) for seed in range(8)])
    assert ratio == pytest.approx(6.0 / 11.0, rel=0.1)


def _cand(vec):
    x = M.RelativeState(lg.exp_map(np.asarray(vec, dtype=float))[None])
    return gils.Candidate(x, np.eye(3), float(np.sum(np.square(vec))))


def test_dedup_merges_close_modes():
    c = [_cand([0.0, 1.0, 0.0]), _cand([0.01, 1.0, 0.0]), _cand([0.0, 2.0, 0.0])]
    kept = gils.deduplicate_modes(c, 0.1)
    assert len(kept) == 2
    assert kept[0] is c[0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=12))
def test_dedup_idempotent(vecs):
    cands = [_cand(v) for v in vecs]
    once = gils.deduplicate_modes(cands, 0.3)
    twice = gils.deduplicate_modes(once, 0.3)
    assert [id(c) for c in once] == [id(c) for c in twice]


def test_lift_preserves_planar_ranges(rng):
    g2 = geometries(3, dim=2)
    g3 = geometries(3, dim=3)
    graph = M.inter_robot_graph(g2, 0.1)
    x = planar_scene(rng, 3)
    x3, P3 = gils.lift_to_se3(x, np.eye(6))
    assert np.allclose(M.range_stack(x3, g3, graph), M.range_stack(x, g2, graph), atol=1e-12)
    assert P3.shape == (12, 12)
    assert P3[0, 0] == pytest.approx(0.05**2)
    assert P3[5, 5] == pytest.approx(0.05**2)
    assert P3[2, 2] == 1.0


def test_lift_rejects_3d_state(rng):
    with pytest.raises(InvalidArgumentError):
        gils.lift_to_se3(M.RelativeState(np.eye(4)[None]), np.eye(6))


def test_single_mode_weight_is_one():
    mix = gils.build_mixture([(M.RelativeState(np.eye(4)[None]), np.eye(6), 0.0)])
    assert mix.weights.tolist() == [1.0]


def test_empty_mixture_rejected():
    with pytest.raises(NoSolutionError):
        gils.build_mixture([])


def test_initialize_with_noise_keeps_a_mode_near_truth():
    r = np.random.default_rng(11)
    g = geometries(3, dim=2)
    graph = M.inter_robot_graph(g, 0.1)
    for _ in range(5):
        x = planar_scene(r, 3)
        snaps = [M.RangeSnapshot(k / 50.0, M.range_stack(x, g, graph) + 0.1 * r.normal(size=12))
                 for k in range(200)]
        res = gils.initialize(snaps, g, graph)
        err = min(max(np.linalg.norm(c.state.poses[k][:2, 2] - x.poses[k][:2, 2]) for k in range(2))
                  for c in res.candidates)
        assert err < 0.2
        assert res.mixture.weights.sum() == pytest.approx(1.0, abs=1e-12)
