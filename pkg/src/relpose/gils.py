"""Geometrically-initialized least squares.

Every geometric mode combination is refined by Gauss-Newton against the
time-averaged static ranges, given a residual-scaled covariance, merged
with near-duplicates, lifted from SE(2) to SE(3) and packed into an
equally weighted Gaussian mixture.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import liegroup as lg
from .ambiguity import geometric_modes
from .errors import DegenerateGeometryError, InvalidArgumentError, NoSolutionError, SingularRotationError
from .models import MeasurementGraph, RangeSnapshot, RelativeState, RobotGeometry, meas_jacobian, range_stack

log = logging.getLogger(__name__)

RANK_RTOL = 1e-10


@dataclass
class GilsOptions:
    step: float = 1.0
    max_iter: int = 50
    step_tol: float = 1e-8
    max_halvings: int = 5
    divergence_limit: int = 5
    merge_tol: float = 0.1
    tilt_std: float = 0.05  # rad, prior on relative roll/pitch after the lift
    height_std: float = 0.05  # m, prior on relative height after the lift
    range_std: float | None = None  # m; None uses sigma / sqrt(count) of the averaged ranges
    disc_sigmas: float = 4.0
    jitter: float = 0.01  # tangent offset used to leave a rank-deficient (collinear) start


@dataclass
class AveragedRanges:
    ybar: np.ndarray
    count: int
    window: tuple[float, float]


@dataclass(eq=False)
class GaussianMode:
    weight: float
    mean: RelativeState
    cov: np.ndarray
    cost: float = float("nan")


@dataclass(eq=False)
class GaussianMixture:
    modes: list[GaussianMode]

    def __post_init__(self):
        if not self.modes:
            raise NoSolutionError("mixture needs at least one mode")

    @property
    def weights(self) -> np.ndarray:
        return np.array([m.weight for m in self.modes])

    def __len__(self):
        return len(self.modes)


@dataclass(eq=False)
class RefineResult:
    state: RelativeState
    iterations: int
    cost: float
    converged: bool


@dataclass(eq=False)
class Candidate:
    state: RelativeState
    cov: np.ndarray
    cost: float
    sigma2: float = 0.0
    source: tuple = field(default_factory=tuple)


def average_ranges(snapshots: Sequence[RangeSnapshot]) -> AveragedRanges:
    if not snapshots:
        raise InvalidArgumentError("cannot average an empty list of range snapshots")
    Y = np.stack([s.values for s in snapshots])
    return AveragedRanges(Y.mean(axis=0), len(snapshots), (snapshots[0].timestamp, snapshots[-1].timestamp))


def _ybar(y) -> np.ndarray:
    return y.ybar if isinstance(y, AveragedRanges) else np.asarray(y, dtype=float)


def _normal_matrix(H: np.ndarray) -> np.ndarray:
    N = H.T @ H
    N = 0.5 * (N + N.T)
    w = np.linalg.eigvalsh(N)
    if w[-1] <= 0.0 or w[0] < RANK_RTOL * w[-1]:
        raise DegenerateGeometryError("normal matrix H^T H is rank deficient")
    return N


def refine_mode(x0: RelativeState, ybar, geoms: Sequence[RobotGeometry], graph: MeasurementGraph,
                opts: GilsOptions | None = None) -> RefineResult:
    """Gauss-Newton with step -(H^T H)^-1 H^T e and halving backtracking."""
    opts = opts or GilsOptions()
    yb = _ybar(ybar)
    x = x0
    e = range_stack(x, geoms, graph) - yb
    cost = 0.5 * float(e @ e)
    best = (x, cost)
    increases = 0
    for it in range(opts.max_iter):
        H = meas_jacobian(x, geoms, graph)
        N = _normal_matrix(H)
        dx = -np.linalg.solve(N, H.T @ e)
        if np.linalg.norm(dx) < opts.step_tol:
            return RefineResult(best[0], it, best[1], True)
        lam = opts.step
        for _ in range(opts.max_halvings + 1):
            xn = x.oplus(lam * dx)
            en = range_stack(xn, geoms, graph) - yb
            cn = 0.5 * float(en @ en)
            if cn <= cost * (1.0 + 1e-12) + 1e-30:
                break
            lam *= 0.5
        increases = increases + 1 if cn > cost * (1.0 + 1e-12) + 1e-30 else 0
        x, e, cost = xn, en, cn
        if cost < best[1]:
            best = (x, cost)
        if increases >= opts.divergence_limit:
            return RefineResult(best[0], it + 1, best[1], False)
    return RefineResult(best[0], opts.max_iter, best[1], False)


def residual_dof(graph: MeasurementGraph, n_robots: int) -> int:
    return len(graph) - (n_robots - 2)


def mode_covariance(xhat: RelativeState, ybar, geoms: Sequence[RobotGeometry], graph: MeasurementGraph):
    """Return ``(P, sigma2)`` with ``sigma2 = e^T e / L`` and ``P = sigma2 (H^T H)^-1``."""
    e = range_stack(xhat, geoms, graph) - _ybar(ybar)
    L = residual_dof(graph, xhat.n_robots)
    sigma2 = float(e @ e) / L
    N = _normal_matrix(meas_jacobian(xhat, geoms, graph))
    P = sigma2 * np.linalg.inv(N)
    return 0.5 * (P + P.T), sigma2


def state_distance(a: RelativeState, b: RelativeState) -> float:
    """Norm of the stacked blockwise log(a^-1 b); inf across a pi rotation."""
    try:
        d = np.concatenate([lg.log_map(lg.inverse(Ta) @ Tb) for Ta, Tb in zip(a.poses, b.poses)])
    except SingularRotationError:
        return float("inf")
    return float(np.linalg.norm(d))


def deduplicate_modes(cands: Sequence[Candidate], merge_tol: float = 0.1) -> list[Candidate]:
    """Greedy merge in order of cost: a mode survives if no cheaper survivor is within merge_tol."""
    order = sorted(range(len(cands)), key=lambda i: (cands[i].cost, i))
    kept: list[Candidate] = []
    for i in order:
        c = cands[i]
        if all(state_distance(k.state, c.state) >= merge_tol for k in kept):
            kept.append(c)
    return kept


LIFT_INDEX = np.array([2, 3, 4])  # SE(2) [theta, x, y] -> SE(3) [phi_z, rho_x, rho_y]


def lift_to_se3(x2d: RelativeState, P2d: np.ndarray, tilt_std: float = 0.05, height_std: float = 0.05):
    if x2d.n != 2:
        raise InvalidArgumentError("lift_to_se3 expects a planar state")
    K = x2d.n_robots - 1
    poses = np.tile(np.eye(4), (K, 1, 1))
    poses[:, :2, :2] = x2d.poses[:, :2, :2]
    poses[:, :2, 3] = x2d.poses[:, :2, 2]
    P3 = np.zeros((6 * K, 6 * K))
    idx = np.concatenate([6 * k + LIFT_INDEX for k in range(K)])
    P3[np.ix_(idx, idx)] = P2d
    for k in range(K):
        P3[6 * k, 6 * k] = P3[6 * k + 1, 6 * k + 1] = tilt_std**2
        P3[6 * k + 5, 6 * k + 5] = height_std**2
    return RelativeState(poses), P3


def build_mixture(modes: Sequence[tuple[RelativeState, np.ndarray, float]]) -> GaussianMixture:
    if not modes:
        raise NoSolutionError("no modes survived initialization")
    w = 1.0 / len(modes)
    return GaussianMixture([GaussianMode(w, x, P, c) for x, P, c in modes])


def _refine_from(x0: RelativeState, avg, geoms, graph, opts: GilsOptions) -> RefineResult:
    """refine_mode, restarting off a collinear start where H^T H is singular.

    Clamped tangent circles can put the target tags exactly on the reference
    baseline axis, where every range gradient is parallel. Both sides of that
    line are tried and the cheaper converged result is kept.
    """
    try:
        return refine_mode(x0, avg, geoms, graph, opts)
    except DegenerateGeometryError:
        if opts.jitter <= 0.0:
            raise
    m = x0.tangent_dim
    results = []
    for sign in (1.0, -1.0):
        dx = np.zeros(x0.dof)
        dx[m - 1::m] = sign * opts.jitter
        dx[0::m] = sign * opts.jitter
        try:
            results.append(refine_mode(x0.oplus(dx), avg, geoms, graph, opts))
        except DegenerateGeometryError:
            continue
    if not results:
        raise DegenerateGeometryError("normal matrix singular at the geometric start and its offsets")
    return min(results, key=lambda r: (not r.converged, r.cost))


@dataclass(eq=False)
class InitResult:
    mixture: GaussianMixture
    n_geometric: int
    n_converged: int
    candidates: list[Candidate]


def averaged_std(sigma: np.ndarray, count: int) -> float:
    return float(np.max(sigma) / np.sqrt(count))


def initialize(ranges, geoms: Sequence[RobotGeometry], graph: MeasurementGraph,
               opts: GilsOptions | None = None) -> InitResult:
    """Full static initialization: geometry, refinement, dedup, lift, mixture."""
    opts = opts or GilsOptions()
    avg = ranges if isinstance(ranges, AveragedRanges) else average_ranges(ranges)
    std = opts.range_std if opts.range_std is not None else averaged_std(graph.sigma, avg.count)
    combos = geometric_modes(avg.ybar, geoms, graph, std, opts.disc_sigmas)
    cands = []
    for combo in combos:
        try:
            res = _refine_from(combo.state, avg, geoms, graph, opts)
            if not res.converged:
                log.debug("mode %s did not converge", combo.mode_indices)
                continue
            P, s2 = mode_covariance(res.state, avg, geoms, graph)
        except DegenerateGeometryError as exc:
            log.debug("mode %s dropped: %s", combo.mode_indices, exc)
            continue
        cands.append(Candidate(res.state, P, res.cost, s2, combo.mode_indices))
    if not cands:
        raise NoSolutionError("no geometric mode converged in least squares")
    kept = deduplicate_modes(cands, opts.merge_tol)
    lifted = []
    for c in kept:
        x3, P3 = lift_to_se3(c.state, c.cov, opts.tilt_std, opts.height_std)
        lifted.append((x3, P3, c.cost))
    return InitResult(build_mixture(lifted), len(combos), len(cands), kept)
