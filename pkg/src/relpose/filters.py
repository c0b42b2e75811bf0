"""EKF, Gaussian-sum filter and bootstrap particle filter over SE(3)^(N-1).

The single EKF here is the reference implementation built on ``models``. The
GSF and PF run on the stacked kernels in :mod:`relpose.kernels`; a GSF with
one mode reproduces the reference EKF.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import kernels
from . import liegroup as lg
from .errors import InvalidArgumentError, NumericalFailureError
from .gils import GaussianMixture
from .models import (MeasurementGraph, RelativeState, RobotGeometry, TagIndex, VelocityInput,
                     meas_jacobian, process_jacobian, process_noise, propagate, range_stack)

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-12
PRUNE_BELOW = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


def repair_cov(P: np.ndarray) -> np.ndarray:
    """Symmetrize; clamp negative eigenvalues only when Cholesky fails."""
    P = 0.5 * (P + P.T)
    try:
        np.linalg.cholesky(P)
        return P
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(P)
        P = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        return 0.5 * (P + P.T)


def gaussian_loglik(nu: np.ndarray, S: np.ndarray) -> float:
    L = np.linalg.cholesky(S)
    z = np.linalg.solve(L, nu)
    return float(-0.5 * (z @ z + 2.0 * np.sum(np.log(np.diag(L))) + len(nu) * LOG_2PI))


# ---------------------------------------------------------------- inputs


@dataclass
class InputSet:
    """Inputs of every robot for one step, reference robot first."""

    u: np.ndarray  # (N, m)
    Q: np.ndarray  # (N, m, m)

    @classmethod
    def from_velocities(cls, inputs: Sequence[VelocityInput]) -> "InputSet":
        u = np.stack([np.asarray(v.u, dtype=float) for v in inputs])
        m = u.shape[1]
        Q = np.stack([np.zeros((m, m)) if v.Q is None else np.asarray(v.Q, dtype=float) for v in inputs])
        return cls(u, Q)

    def velocities(self, t: float = 0.0) -> list[VelocityInput]:
        return [VelocityInput(i + 1, t, self.u[i], self.Q[i]) for i in range(len(self.u))]


# ---------------------------------------------------------------- range model


@dataclass(frozen=True)
class RangeModel:
    """Flat arrays describing the measurement graph for the batch kernels."""

    tag_robot: np.ndarray  # (T,) robot index, 0 = reference
    tag_off: np.ndarray  # (T, 3)
    edges: np.ndarray  # (E, 2) rows into tag_robot
    r_var: np.ndarray  # (E,)

    @classmethod
    def build(cls, geoms: Sequence[RobotGeometry], graph: MeasurementGraph) -> "RangeModel":
        idx = TagIndex.build(geoms)
        tags = sorted({t for e in graph.edges for t in e})
        row = {t: k for k, t in enumerate(tags)}
        robot, off = [], []
        for t in tags:
            r, o = idx.lookup(t)
            o3 = np.zeros(3)
            o3[:len(o)] = o
            robot.append(r)
            off.append(o3)
        edges = np.array([[row[a], row[b]] for a, b in graph.edges], dtype=np.int64).reshape(-1, 2)
        return cls(np.array(robot, dtype=np.int64), np.array(off).reshape(-1, 3), edges,
                   np.asarray(graph.sigma, dtype=float) ** 2 * np.ones(len(graph)))


# ---------------------------------------------------------------- EKF


@dataclass(eq=False)
class EkfBelief:
    mean: RelativeState
    cov: np.ndarray


def ekf_predict(b: EkfBelief, inputs: InputSet, dt: float) -> EkfBelief:
    if dt <= 0.0:
        raise InvalidArgumentError("dt must be positive")
    vel = inputs.velocities()
    u1, up = vel[0], vel[1:]
    A = process_jacobian(up, dt)
    Qs = process_noise(b.mean, u1, up, dt)
    x = propagate(b.mean, u1, up, dt)
    return EkfBelief(x, repair_cov(A @ b.cov @ A.T + Qs))


def ekf_correct(b: EkfBelief, y, geoms: Sequence[RobotGeometry], graph: MeasurementGraph):
    """Joseph-form correction. Returns ``(belief, S, loglik)``."""
    y = np.asarray(getattr(y, "values", y), dtype=float)
    H = meas_jacobian(b.mean, geoms, graph)
    R = graph.R
    P = b.cov
    S = H @ P @ H.T + R
    S = 0.5 * (S + S.T)
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError("innovation covariance is not positive definite") from exc
    nu = y - range_stack(b.mean, geoms, graph)
    K = np.linalg.solve(S, H @ P).T
    x = b.mean.oplus(K @ nu)
    IKH = np.eye(P.shape[0]) - K @ H
    Pn = IKH @ P @ IKH.T + K @ R @ K.T
    return EkfBelief(x, repair_cov(Pn)), S, gaussian_loglik(nu, S)


# ---------------------------------------------------------------- GSF


@dataclass(eq=False)
class GsfBelief:
    """Bank of EKFs stored as stacked arrays: X (M, K, 4, 4), P (M, D, D)."""

    X: np.ndarray
    P: np.ndarray
    weights: np.ndarray
    reset: bool = False  # set when every likelihood underflowed on the last step
    loglik: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.X.ndim != 4 or len(self.X) != len(self.weights) or len(self.P) != len(self.weights):
            raise InvalidArgumentError("inconsistent GSF belief arrays")

    def __len__(self):
        return len(self.weights)

    @property
    def modes(self) -> list[tuple[float, EkfBelief]]:
        return [(float(w), EkfBelief(RelativeState(self.X[i].copy()), self.P[i].copy()))
                for i, w in enumerate(self.weights)]

    def copy(self) -> "GsfBelief":
        return GsfBelief(self.X.copy(), self.P.copy(), self.weights.copy(), self.reset)


def init_gsf(mix: GaussianMixture) -> GsfBelief:
    X = np.stack([m.mean.poses for m in mix.modes]).astype(float)
    if X.shape[-1] != 4:
        raise InvalidArgumentError("the filters run on SE(3) states; lift the mixture first")
    P = np.stack([np.asarray(m.cov, dtype=float) for m in mix.modes])
    return GsfBelief(X, P, mix.weights.copy())


def update_weights(w: np.ndarray, loglik: np.ndarray, floor: float = WEIGHT_FLOOR, prune: bool = False):
    """Bayes update in log space. Returns ``(weights, reset)``."""
    with np.errstate(divide="ignore"):
        lw = np.log(w) + loglik
    if not np.any(np.isfinite(lw)):
        log.warning("all mode likelihoods underflowed; resetting GSF weights to uniform")
        return np.full(len(w), 1.0 / len(w)), True
    wn = np.exp(lw - logsumexp(lw))
    if prune:
        wn = np.where(wn < PRUNE_BELOW, 0.0, wn)
    else:
        wn = np.maximum(wn, floor)
    return wn / wn.sum(), False


def gsf_predict(b: GsfBelief, inputs: InputSet, dt: float, backend=None) -> GsfBelief:
    if dt <= 0.0:
        raise InvalidArgumentError("dt must be positive")
    kern = backend or kernels.active
    X, P = kern.ekf_predict_batch(b.X, b.P, inputs.u, inputs.Q, dt)
    return GsfBelief(X, P, b.weights.copy())


def gsf_correct(b: GsfBelief, y, model: RangeModel, backend=None, prune: bool = False) -> GsfBelief:
    kern = backend or kernels.active
    y = np.asarray(getattr(y, "values", y), dtype=float)
    X, P, _, loglik, ok = kern.ekf_correct_batch(b.X, b.P, y, model.r_var, model.tag_robot,
                                                 model.tag_off, model.edges)
    if not np.all(ok):
        log.warning("innovation covariance not positive definite for modes %s", np.flatnonzero(~ok))
    w, reset = update_weights(b.weights, loglik, prune=prune)
    return GsfBelief(X, P, w, reset, loglik)


def gsf_step(b: GsfBelief, inputs: InputSet, dt: float, y, model: RangeModel, backend=None,
             prune: bool = False) -> GsfBelief:
    """Predict and correct every mode, then reweight by measurement likelihood."""
    return gsf_correct(gsf_predict(b, inputs, dt, backend), y, model, backend, prune)


def tangent_mean(X: np.ndarray, w: np.ndarray, anchor: int, backend=None) -> np.ndarray:
    """Weighted mean of the poses ``X`` (M, K, 4, 4) in the chart at ``X[anchor]``.

    Members whose offset from the anchor is within 1e-6 rad of a half turn
    have no well-defined log and are left out.
    """
    kern = backend or kernels.active
    A = X[anchor]
    rel = kern.se3_inv_batch(A)[None] @ X
    M, K = X.shape[:2]
    xi = kern.se3_log_batch(rel.reshape(M * K, 4, 4)).reshape(M, K, 6)
    ang = np.linalg.norm(xi[..., :3], axis=-1).max(axis=1)
    use = ang < math.pi - lg.PI_MARGIN
    use[anchor] = True
    wu = w * use
    wu = wu / wu.sum()
    dx = np.einsum("m,mkd->kd", wu, xi)
    return A @ kern.se3_exp_batch(dx)


def gsf_estimate(b: GsfBelief, backend=None):
    """Return ``(mean, cov, argmax)``; cov is the heaviest mode's."""
    i = int(np.argmax(b.weights))
    if len(b) == 1:
        return RelativeState(b.X[0].copy()), b.P[0].copy(), 0
    return RelativeState(tangent_mean(b.X, b.weights, i, backend)), b.P[i].copy(), i


# ---------------------------------------------------------------- PF


@dataclass
class PfNoise:
    """Sampling noise for the bootstrap particle filter.

    ``input_scale`` multiplies every robot's input covariance; ``roughen``
    is the std of tangent jitter added after resampling (angular, then
    translational).
    """

    input_scale: float = 1.0
    roughen: tuple[float, float] = (0.0, 0.0)


@dataclass(eq=False)
class ParticleBelief:
    X: np.ndarray  # (count, K, 4, 4)
    weights: np.ndarray
    prior: GaussianMixture | None = None
    resampled: bool = False
    reset: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.X) < 1 or len(self.X) != len(self.weights):
            raise InvalidArgumentError("particle belief needs at least one particle and one weight each")

    @property
    def count(self) -> int:
        return len(self.weights)

    @property
    def particles(self) -> list[RelativeState]:
        return [RelativeState(x) for x in self.X]


def effective_sample_size(w: np.ndarray) -> float:
    return float(1.0 / np.sum(np.square(w)))


def systematic_resample(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(w)
    pos = (rng.random() + np.arange(n)) / n
    c = np.cumsum(w)
    c[-1] = 1.0
    return np.searchsorted(c, pos, side="right")


def stratified_counts(w: np.ndarray, count: int) -> np.ndarray:
    """Integer counts summing to ``count``, each within one of ``w * count``."""
    raw = np.asarray(w, dtype=float) * count
    n = np.floor(raw).astype(int)
    rest = count - n.sum()
    if rest > 0:
        order = np.argsort(-(raw - n), kind="stable")
        n[order[:rest]] += 1
    return n


def _sqrt_psd(P: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (P + P.T))
    return vecs * np.sqrt(np.maximum(vals, 0.0))


def sample_mixture(mix: GaussianMixture, count: int, rng: np.random.Generator, backend=None) -> np.ndarray:
    """Draw ``count`` states, stratified by weight and Gaussian in each mode's tangent."""
    kern = backend or kernels.active
    counts = stratified_counts(mix.weights, count)
    out = []
    for mode, n in zip(mix.modes, counts):
        if n == 0:
            continue
        poses = np.asarray(mode.mean.poses, dtype=float)
        K = poses.shape[0]
        dx = rng.standard_normal((n, 6 * K)) @ _sqrt_psd(np.asarray(mode.cov)).T
        out.append(poses[None] @ kern.se3_exp_batch(dx.reshape(n, K, 6)))
    return np.concatenate(out, axis=0)


def init_pf(mix: GaussianMixture, count: int, rng: np.random.Generator, backend=None) -> ParticleBelief:
    if count < 1:
        raise InvalidArgumentError("particle count must be at least 1")
    X = sample_mixture(mix, count, rng, backend)
    return ParticleBelief(X, np.full(count, 1.0 / count), mix)


def pf_step(b: ParticleBelief, inputs: InputSet, dt: float, y, model: RangeModel,
            noise: PfNoise, rng: np.random.Generator, backend=None) -> ParticleBelief:
    """Bootstrap step: noisy propagation, likelihood weighting, systematic resampling."""
    if dt <= 0.0:
        raise InvalidArgumentError("dt must be positive")
    kern = backend or kernels.active
    y = np.asarray(getattr(y, "values", y), dtype=float)
    n = b.count
    Nr, m = inputs.u.shape
    chol = np.stack([_sqrt_psd(noise.input_scale * Q) for Q in inputs.Q])
    eps = np.einsum("rij,brj->bri", chol, rng.standard_normal((n, Nr, m)))
    X = kern.propagate_batch(b.X, inputs.u[None] + eps, dt)

    yhat = kern.ranges_batch(X, model.tag_robot, model.tag_off, model.edges)
    ll = -0.5 * np.sum((y - yhat) ** 2 / model.r_var, axis=1)
    with np.errstate(divide="ignore"):
        lw = np.log(b.weights) + ll
    reset = False
    if not np.any(np.isfinite(lw)):
        if b.prior is None:
            raise NumericalFailureError("all particle weights vanished and no prior is stored")
        log.warning("all particle weights vanished; redrawing from the prior mixture")
        X = sample_mixture(b.prior, n, rng, kern)
        return ParticleBelief(X, np.full(n, 1.0 / n), b.prior, True, True)
    w = np.exp(lw - logsumexp(lw))
    w /= w.sum()

    resampled = False
    if effective_sample_size(w) < n / 2.0:
        idx = systematic_resample(w, rng)
        X = X[idx]
        w = np.full(n, 1.0 / n)
        resampled = True
        sa, st = noise.roughen
        if sa > 0.0 or st > 0.0:
            K = X.shape[1]
            std = np.tile(np.r_[np.full(3, sa), np.full(3, st)], K)
            dx = rng.standard_normal((n, 6 * K)) * std
            X = X @ kern.se3_exp_batch(dx.reshape(n, K, 6))
    return ParticleBelief(X, w, b.prior, resampled, reset)


def pf_estimate(b: ParticleBelief, backend=None) -> RelativeState:
    """Weighted tangent mean anchored at the heaviest particle."""
    i = int(np.argmax(b.weights))
    return RelativeState(tangent_mean(b.X, b.weights, i, backend))
