"""Synthetic scenarios, filter runs and Monte-Carlo evaluation.

A trial has a static window, during which the robots do not move and only
ranges are logged, followed by ``duration * rate`` motion steps. The static
window ends at t = 0; GI-LS runs on it and every filter starts at t = 0.

Random streams are derived from the master seed without shared state:
trial ``i`` stream ``j`` is ``SeedSequence(master, spawn_key=(i, j))``.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import chi2

from . import gils
from . import liegroup as lg
from .errors import InvalidArgumentError, NumericalFailureError, RelPoseError, SingularRotationError
from .filters import (GsfBelief, InputSet, PfNoise, RangeModel, gsf_estimate, gsf_step, init_gsf, init_pf,
                      pf_estimate, pf_step)
from .models import MeasurementGraph, RangeSnapshot, RelativeState, RobotGeometry, inter_robot_graph

log = logging.getLogger(__name__)

FILTERS = ("ekf", "gsf", "pf")
STREAM_TRAJ, STREAM_RANGE, STREAM_INPUT, STREAM_EKF, STREAM_PF = range(5)
DEFAULT_TAGS = ((0.17, 0.17, 0.0), (0.17, -0.17, 0.0))
MAX_FAIL_FRACTION = 0.2


def default_geometries(n_robots: int, tags=DEFAULT_TAGS) -> list[RobotGeometry]:
    """Two tags per robot, ids 2p-1 and 2p for robot p."""
    return [RobotGeometry(p, {2 * p - 1 + k: np.array(t, dtype=float) for k, t in enumerate(tags)})
            for p in range(1, n_robots + 1)]


@dataclass
class TrajectoryConfig:
    yaw_rate_std: float = 0.3  # rad/s
    tilt_rate_std: float = 0.05  # rad/s
    level_gain: float = 1.0  # 1/s, pulls roll and pitch back to level
    speed_std: float = 0.5  # m/s, horizontal
    climb_std: float = 0.2  # m/s
    cutoff_hz: float = 0.5
    workspace: tuple[float, float, float] = (6.0, 6.0, 3.0)
    wall_margin: float = 0.75  # m
    wall_gain: float = 1.0  # 1/s
    min_separation: float = 1.0  # m
    repulsion_gain: float = 1.0  # 1/s
    start_height: float = 1.0  # m
    max_start_distance: float = 5.0  # m, from robot 1


@dataclass
class FilterConfig:
    particles: int = 1500
    pf_input_scale: float = 1.0
    pf_roughen: tuple[float, float] = (0.0, 0.0)  # rad, m; jitter after resampling
    prune: bool = False
    gils: gils.GilsOptions = field(default_factory=gils.GilsOptions)


@dataclass
class ScenarioConfig:
    n_robots: int = 3
    geometries: list[RobotGeometry] | None = None
    rate: float = 50.0  # Hz
    sigma: float = 0.1  # m
    duration: float = 30.0  # s of motion
    warmup: float = 4.0  # s static before t = 0
    gamma: int | None = None  # snapshots averaged for GI-LS; None = every warmup snapshot
    gyro_std: float = 0.02  # rad/s, per-axis input noise
    velocity_std: float = 0.05  # m/s
    seed: int = 0
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)

    def __post_init__(self):
        if self.rate <= 0.0:
            raise InvalidArgumentError("rate must be positive")
        if self.sigma <= 0.0:
            raise InvalidArgumentError("sigma must be positive")
        if not self.duration > self.warmup >= 0.0:
            raise InvalidArgumentError("need duration > warmup >= 0")
        if self.n_robots < 2:
            raise InvalidArgumentError("need at least two robots")
        if self.geometries is None:
            self.geometries = default_geometries(self.n_robots)
        if len(self.geometries) != self.n_robots:
            raise InvalidArgumentError("one geometry per robot is required")

    @property
    def steps(self) -> int:
        return int(round(self.duration * self.rate))

    @property
    def static_count(self) -> int:
        if self.gamma is not None:
            return int(self.gamma)
        return max(1, int(round(self.warmup * self.rate)))

    def graph(self) -> MeasurementGraph:
        return inter_robot_graph(self.geometries, self.sigma)

    def input_cov(self) -> np.ndarray:
        q = np.r_[np.full(3, self.gyro_std**2), np.full(3, self.velocity_std**2)]
        return np.tile(np.diag(q), (self.n_robots, 1, 1))


def stream(master: int, trial: int, which: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=(trial, which)))


# ---------------------------------------------------------------- generation


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray  # (K+1,), t_0 = 0
    poses: np.ndarray  # (K+1, N, 4, 4) world poses
    u: np.ndarray  # (K, N, 6) body velocities held over (t_k, t_k+1]

    def relative(self) -> np.ndarray:
        """Stacked T_1p for every timestamp, shape (K+1, N-1, 4, 4)."""
        T1inv = np.linalg.inv(self.poses[:, :1])
        return T1inv @ self.poses[:, 1:]


def step_times(rate: float, steps: int) -> np.ndarray:
    return np.arange(steps + 1) / rate


def _initial_poses(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    tc = cfg.trajectory
    half = 0.5 * np.array(tc.workspace[:2]) - tc.wall_margin
    N = cfg.n_robots
    for _ in range(10000):
        xy = rng.uniform(-half, half, size=(N, 2))
        d = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
        off = d[~np.eye(N, dtype=bool)]
        if off.min() >= tc.min_separation and d[0, 1:].max() <= tc.max_start_distance:
            break
    else:
        raise InvalidArgumentError("could not place robots inside the workspace")
    yaw = rng.uniform(-math.pi, math.pi, N)
    T = np.tile(np.eye(4), (N, 1, 1))
    opts = gils.GilsOptions()
    for p in range(N):
        C = lg.rotz(yaw[p])
        z = tc.start_height
        if p > 0:
            # roll, pitch and height relative to robot 1 follow the prior used by the lift
            C = C @ lg.so3_exp(np.r_[rng.normal(0.0, opts.tilt_std, 2), 0.0])
            z += rng.normal(0.0, opts.height_std)
        T[p, :3, :3] = C
        T[p, :3, 3] = [xy[p, 0], xy[p, 1], z]
    return T


def generate_trajectory(cfg: ScenarioConfig, rng: np.random.Generator, still: bool = False) -> Trajectory:
    """Band-limited random motion for every robot, integrated exactly.

    Yaw rate and world-frame velocity are first-order low-passed white
    noise. Roll and pitch rates add a leveling term. Soft walls and pairwise
    repulsion keep the robots inside the workspace and apart. ``still``
    returns zero velocities.
    """
    tc = cfg.trajectory
    K, N = cfg.steps, cfg.n_robots
    dt = 1.0 / cfg.rate
    a = math.exp(-2.0 * math.pi * tc.cutoff_hz * dt)
    b = math.sqrt(1.0 - a * a)
    lo = np.array([-0.5 * tc.workspace[0], -0.5 * tc.workspace[1], 0.0]) + tc.wall_margin
    hi = np.array([0.5 * tc.workspace[0], 0.5 * tc.workspace[1], tc.workspace[2]]) - tc.wall_margin
    std_v = np.array([tc.speed_std, tc.speed_std, tc.climb_std])
    std_w = np.array([tc.tilt_rate_std, tc.tilt_rate_std, tc.yaw_rate_std])
    ez = np.array([0.0, 0.0, 1.0])

    T = np.empty((K + 1, N, 4, 4))
    T[0] = _initial_poses(cfg, rng)
    u = np.zeros((K, N, 6))
    ou_v = np.zeros((N, 3))
    ou_w = np.zeros((N, 3))
    for k in range(K):
        ou_v = a * ou_v + b * std_v * rng.standard_normal((N, 3))
        ou_w = a * ou_w + b * std_w * rng.standard_normal((N, 3))
        pos = T[k, :, :3, 3]
        for p in range(N):
            C = T[k, p, :3, :3]
            r = pos[p]
            v = ou_v[p] + tc.wall_gain * (np.maximum(lo - r, 0.0) - np.maximum(r - hi, 0.0))
            for q in range(N):
                if q == p:
                    continue
                d = r[:2] - pos[q, :2]
                dist = float(np.linalg.norm(d))
                if 0.0 < dist < tc.min_separation:
                    v[:2] += tc.repulsion_gain * (tc.min_separation - dist) * d / dist
            up = C.T @ ez
            w = C.T @ (ou_w[p, 2] * ez) + np.r_[ou_w[p, :2], 0.0] - tc.level_gain * np.cross(up, ez)
            u[k, p] = np.r_[w, C.T @ v]
        if still:
            u[k] = 0.0
        T[k + 1] = T[k] @ np.stack([lg.exp_map(dt * u[k, p]) for p in range(N)])
    return Trajectory(step_times(cfg.rate, K), T, u)


def simulate_ranges(truth_rel: np.ndarray, model: RangeModel, sigma: float, rng: np.random.Generator,
                    backend=None) -> np.ndarray:
    """Noisy stacked ranges for each relative state in ``truth_rel`` (B, N-1, 4, 4)."""
    from . import kernels

    kern = backend or kernels.active
    y = kern.ranges_batch(np.ascontiguousarray(truth_rel), model.tag_robot, model.tag_off, model.edges)
    if sigma > 0.0:
        y = y + sigma * rng.standard_normal(y.shape)
    return y


# ---------------------------------------------------------------- metrics


def pose_errors(est: RelativeState, truth: RelativeState) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair attitude error (rad) and position error (m), both in frame 1."""
    E, T = np.asarray(est.poses), np.asarray(truth.poses)
    n = E.shape[-1] - 1
    att = np.array([lg.rotation_angle(a[:n, :n] @ b[:n, :n].T) for a, b in zip(E, T)])
    pos = np.linalg.norm(E[:, :n, n] - T[:, :n, n], axis=-1)
    return att, pos


def rmse(errors) -> float:
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise InvalidArgumentError("rmse of an empty error set")
    return float(np.sqrt(np.mean(e * e)))


def tangent_error(est: RelativeState, truth: RelativeState) -> np.ndarray:
    """Stacked blockwise log(truth^-1 est)."""
    return np.concatenate([lg.log_map(lg.inverse(t) @ e) for e, t in zip(est.poses, truth.poses)])


def nees(est: RelativeState, cov: np.ndarray, truth: RelativeState) -> float:
    e = tangent_error(est, truth)
    try:
        L = np.linalg.cholesky(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError("NEES needs a positive-definite covariance") from exc
    z = np.linalg.solve(L, e)
    return float(z @ z)


def nees_bounds(dof: int, trials: int, confidence: float = 0.99) -> tuple[float, float]:
    """Two-sided interval for the trial-averaged NEES."""
    tail = 0.5 * (1.0 - confidence)
    return (float(chi2.ppf(tail, dof * trials) / trials), float(chi2.ppf(1.0 - tail, dof * trials) / trials))


# ---------------------------------------------------------------- trials


@dataclass(eq=False)
class TrialData:
    """Everything a filter run consumes; produced by simulation or read from logs."""

    geoms: list[RobotGeometry]
    graph: MeasurementGraph
    static: list[RangeSnapshot]
    times: np.ndarray  # (K+1,)
    ranges: np.ndarray  # (K, E), ranges[k] is measured at times[k+1]
    u: np.ndarray  # (K, N, 6), measured inputs held over (times[k], times[k+1]]
    Q: np.ndarray  # (N, 6, 6)
    truth: np.ndarray | None = None  # (K+1, N-1, 4, 4)


@dataclass(eq=False)
class TrialResult:
    filter: str
    times: np.ndarray
    att: np.ndarray | None = None  # (K, N-1)
    pos: np.ndarray | None = None
    nees: np.ndarray | None = None  # (K,)
    step_time: np.ndarray | None = None
    weights: np.ndarray | None = None  # (K, M), GSF only
    estimates: np.ndarray | None = None  # (K, N-1, 4, 4)
    init_mode: int | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def final_weights(self):
        return None if self.weights is None else self.weights[-1]


def simulate_trial(cfg: ScenarioConfig, master: int, trial: int, still: bool = False) -> TrialData:
    geoms = cfg.geometries
    graph = cfg.graph()
    model = RangeModel.build(geoms, graph)
    traj = generate_trajectory(cfg, stream(master, trial, STREAM_TRAJ), still)
    rel = traj.relative()
    rng_y = stream(master, trial, STREAM_RANGE)
    G = cfg.static_count
    y_static = simulate_ranges(np.repeat(rel[:1], G, axis=0), model, cfg.sigma, rng_y)
    t_static = (np.arange(G) - (G - 1)) / cfg.rate
    static = [RangeSnapshot(float(t), y) for t, y in zip(t_static, y_static)]
    ranges = simulate_ranges(rel[1:], model, cfg.sigma, rng_y)
    Q = cfg.input_cov()
    rng_u = stream(master, trial, STREAM_INPUT)
    noise = rng_u.standard_normal(traj.u.shape) * np.sqrt(np.diagonal(Q, axis1=1, axis2=2))
    return TrialData(list(geoms), graph, static, traj.times, ranges, traj.u + noise, Q, rel)


def _closest_mode(mix: gils.GaussianMixture, truth: RelativeState) -> int:
    d = []
    for m in mix.modes:
        try:
            d.append(np.linalg.norm(tangent_error(m.mean, truth)))
        except SingularRotationError:
            d.append(np.inf)
    return int(np.argmin(d))


def wrong_mode(mix: gils.GaussianMixture, truth: RelativeState | None, rng: np.random.Generator) -> int:
    """A random mixture mode other than the one nearest the truth."""
    M = len(mix)
    if M == 1:
        return 0
    if truth is None:
        return int(rng.integers(M))
    good = _closest_mode(mix, truth)
    j = int(rng.integers(M - 1))
    return j + (j >= good)


def run_filters(data: TrialData, filters: Sequence[str], fcfg: FilterConfig, master: int, trial: int = 0,
                keep_estimates: bool = False) -> tuple[dict[str, TrialResult], gils.InitResult]:
    """Initialize from the static window and run each filter over the motion steps."""
    for f in filters:
        if f not in FILTERS:
            raise InvalidArgumentError(f"unknown filter {f!r}")
    init = gils.initialize(data.static, data.geoms, data.graph, fcfg.gils)
    mix = init.mixture
    model = RangeModel.build(data.geoms, data.graph)
    truth0 = None if data.truth is None else RelativeState(data.truth[0])
    out = {}
    for name in filters:
        if name == "gsf":
            b0 = init_gsf(mix)
            out[name] = _run_bank(name, b0, data, model, fcfg, keep_estimates)
        elif name == "ekf":
            i = wrong_mode(mix, truth0, stream(master, trial, STREAM_EKF))
            b0 = init_gsf(gils.GaussianMixture([gils.GaussianMode(1.0, mix.modes[i].mean, mix.modes[i].cov)]))
            out[name] = _run_bank(name, b0, data, model, fcfg, keep_estimates)
            out[name].init_mode = i
        else:
            out[name] = _run_pf(data, model, mix, fcfg, stream(master, trial, STREAM_PF), keep_estimates)
    return out, init


def _alloc(name, data: TrialData, keep: bool) -> TrialResult:
    K = len(data.times) - 1
    P = data.u.shape[1] - 1
    res = TrialResult(name, data.times[1:].copy(), step_time=np.zeros(K))
    if data.truth is not None:
        res.att = np.zeros((K, P))
        res.pos = np.zeros((K, P))
    if keep:
        res.estimates = np.zeros((K, P, 4, 4))
    return res


def _score(res: TrialResult, data: TrialData, k: int, est: RelativeState, cov=None):
    if res.estimates is not None:
        res.estimates[k] = est.poses
    if data.truth is None:
        return
    truth = RelativeState(data.truth[k + 1])
    res.att[k], res.pos[k] = pose_errors(est, truth)
    if cov is not None:
        try:
            res.nees[k] = nees(est, cov, truth)
        except (SingularRotationError, NumericalFailureError):
            res.nees[k] = np.inf


def _run_bank(name, b: GsfBelief, data: TrialData, model: RangeModel, fcfg: FilterConfig, keep) -> TrialResult:
    res = _alloc(name, data, keep)
    K = len(res.times)
    if data.truth is not None:
        res.nees = np.zeros(K)
    if name == "gsf":
        res.weights = np.zeros((K, len(b)))
    try:
        for k in range(K):
            dt = float(data.times[k + 1] - data.times[k])
            t0 = time.perf_counter()
            b = gsf_step(b, InputSet(data.u[k], data.Q), dt, data.ranges[k], model, prune=fcfg.prune)
            est, cov, _ = gsf_estimate(b)
            res.step_time[k] = time.perf_counter() - t0
            if res.weights is not None:
                res.weights[k] = b.weights
            _score(res, data, k, est, cov)
    except RelPoseError as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def _run_pf(data: TrialData, model: RangeModel, mix, fcfg: FilterConfig, rng, keep) -> TrialResult:
    res = _alloc("pf", data, keep)
    noise = PfNoise(fcfg.pf_input_scale, tuple(fcfg.pf_roughen))
    try:
        b = init_pf(mix, fcfg.particles, rng)
        for k in range(len(res.times)):
            dt = float(data.times[k + 1] - data.times[k])
            t0 = time.perf_counter()
            b = pf_step(b, InputSet(data.u[k], data.Q), dt, data.ranges[k], model, noise, rng)
            est = pf_estimate(b)
            res.step_time[k] = time.perf_counter() - t0
            _score(res, data, k, est)
    except RelPoseError as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def run_trial(cfg: ScenarioConfig, filters: Sequence[str], fcfg: FilterConfig, trial: int = 0,
              keep_estimates: bool = False) -> dict:
    """Simulate and filter one trial. Failures are returned, not raised."""
    try:
        data = simulate_trial(cfg, cfg.seed, trial)
        results, init = run_filters(data, filters, fcfg, cfg.seed, trial, keep_estimates)
        return {"trial": trial, "results": results, "n_modes": len(init.mixture), "error": None}
    except RelPoseError as exc:
        return {"trial": trial, "results": {}, "n_modes": 0, "error": f"{type(exc).__name__}: {exc}"}


def _run_trial_args(args):
    return run_trial(*args)


def worker_count(trials: int) -> int:
    cap = os.environ.get("RELPOSE_WORKERS")
    n = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n, trials))


@dataclass(eq=False)
class MonteCarloReport:
    filters: list[str]
    trials: list[dict]
    summary: dict

    def results(self, name: str) -> list[TrialResult]:
        return [t["results"][name] for t in self.trials if name in t["results"]]


def run_monte_carlo(cfg: ScenarioConfig, trials: int, filters: Sequence[str] = FILTERS,
                    fcfg: FilterConfig | None = None, workers: int | None = None,
                    transient: float = 2.0, keep_estimates: bool = False) -> MonteCarloReport:
    """Run ``trials`` independent trials; the result does not depend on ``workers``."""
    if trials < 1:
        raise InvalidArgumentError("need at least one trial")
    fcfg = fcfg or FilterConfig()
    filters = list(filters)
    jobs = [(cfg, filters, fcfg, i, keep_estimates) for i in range(trials)]
    workers = workers or worker_count(trials)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_run_trial_args, jobs))
    else:
        out = [run_trial(*j) for j in jobs]
    try:
        summary = summarize(out, filters, cfg, transient)
    except RunFailure as exc:
        exc.trials = out
        raise
    return MonteCarloReport(filters, out, summary)


def summarize(out: list[dict], filters: Sequence[str], cfg: ScenarioConfig, transient: float = 2.0) -> dict:
    """Aggregate statistics; raises when more than 20% of trial-filter runs failed."""
    trials = len(out)
    dof = 6 * (cfg.n_robots - 1)
    summary = {"trials": trials, "dof": dof, "filters": {}}
    failed_runs = 0
    for name in filters:
        res = [t["results"].get(name) for t in out]
        ok = [r for r in res if r is not None and not r.failed]
        failed_runs += trials - len(ok)
        att = [rmse(r.att) for r in ok if r.att is not None]
        pos = [rmse(r.pos) for r in ok if r.pos is not None]
        entry = {
            "failed": trials - len(ok),
            "attitude_rmse": att,
            "position_rmse": pos,
            "median_attitude_rmse": float(np.median(att)) if att else None,
            "median_position_rmse": float(np.median(pos)) if pos else None,
        }
        nees_runs = [r.nees for r in ok if r.nees is not None]
        if nees_runs:
            avg = np.mean(np.stack(nees_runs), axis=0)
            lo, hi = nees_bounds(dof, len(nees_runs))
            after = ok[0].times >= transient - 1e-9
            inside = (avg >= lo) & (avg <= hi)
            entry["nees"] = {
                "average": avg.tolist(),
                "bounds": [lo, hi],
                "fraction_inside": float(np.mean(inside[after])) if after.any() else None,
                "mean_after_transient": float(np.mean(avg[after])) if after.any() else None,
            }
        summary["filters"][name] = entry
    summary["trial_errors"] = [t["error"] for t in out if t["error"]]
    total = trials * max(1, len(filters))
    summary["failed_fraction"] = failed_runs / total
    if summary["failed_fraction"] > MAX_FAIL_FRACTION:
        raise RunFailure(summary)
    return summary


def timing_summary(out: list[dict], filters: Sequence[str]) -> dict:
    res = {}
    for name in filters:
        steps = [t["results"][name].step_time for t in out if name in t["results"]]
        if steps:
            res[name] = {"median_step_s": float(np.median(np.concatenate(steps)))}
    return res


class RunFailure(RelPoseError):
    """More than the allowed fraction of trials failed."""

    def __init__(self, summary: dict):
        super().__init__(f"{summary['failed_fraction']:.0%} of trial runs failed")
        self.summary = summary
        self.trials: list[dict] = []
