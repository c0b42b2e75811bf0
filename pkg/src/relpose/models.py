"""Relative-pose state, process model, range model and their Jacobians.

All perturbations are on the right: ``x (+) dx`` replaces each block
``T_1p`` by ``T_1p @ exp(dxi_p^)``. Robot 1 is the reference robot; the
state holds ``T_12 ... T_1N``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import liegroup as lg
from .errors import DegenerateGeometryError, InvalidArgumentError


@dataclass(frozen=True)
class RobotGeometry:
    """Tag layout of one robot. ``tags`` maps tag id -> body-frame offset (m)."""

    robot_id: int
    tags: dict[int, np.ndarray]

    def __post_init__(self):
        tags = {int(k): np.asarray(v, dtype=float) for k, v in self.tags.items()}
        if len(tags) < 2:
            raise InvalidArgumentError(f"robot {self.robot_id} needs at least two tags")
        offs = list(tags.values())
        if np.linalg.norm(offs[1] - offs[0]) <= 0.0:
            raise InvalidArgumentError(f"robot {self.robot_id} has coincident tags")
        object.__setattr__(self, "tags", tags)

    @property
    def tag_ids(self) -> list[int]:
        return list(self.tags)

    @property
    def baseline(self) -> float:
        a, b = list(self.tags.values())[:2]
        return float(np.linalg.norm(b - a))


@dataclass(frozen=True)
class MeasurementGraph:
    """Ordered list of measured tag pairs; the order fixes the stacking of y."""

    edges: tuple[tuple[int, int], ...]
    sigma: np.ndarray

    def __post_init__(self):
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (len(edges),)).copy()
        if not edges:
            raise InvalidArgumentError("measurement graph has no edges")
        if np.any(sigma <= 0.0):
            raise InvalidArgumentError("edge standard deviations must be positive")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "sigma", sigma)

    @property
    def nodes(self) -> list[int]:
        return sorted({t for e in self.edges for t in e})

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.sigma**2)

    def __len__(self):
        return len(self.edges)

    def permuted(self, order) -> "MeasurementGraph":
        return MeasurementGraph(tuple(self.edges[i] for i in order), self.sigma[list(order)])


def inter_robot_graph(geoms: Sequence[RobotGeometry], sigma: float) -> MeasurementGraph:
    """All tag pairs between distinct robots (12 edges for three two-tag robots)."""
    edges = []
    for a in range(len(geoms)):
        for b in range(a + 1, len(geoms)):
            for ta in geoms[a].tag_ids:
                for tb in geoms[b].tag_ids:
                    edges.append((ta, tb))
    return MeasurementGraph(tuple(edges), np.full(len(edges), sigma))


@dataclass
class VelocityInput:
    robot_id: int
    timestamp: float
    u: np.ndarray
    Q: np.ndarray = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        m = self.u.shape[0]
        self.Q = np.zeros((m, m)) if self.Q is None else np.asarray(self.Q, dtype=float)
        if not np.allclose(self.Q, self.Q.T, atol=1e-12):
            raise InvalidArgumentError("input covariance must be symmetric")


@dataclass(eq=False)
class RelativeState:
    """Poses ``T_12 ... T_1N`` stacked as a ``(N-1, n+1, n+1)`` array."""

    poses: np.ndarray

    def __post_init__(self):
        poses = np.array(self.poses, dtype=float)
        if poses.ndim == 2:
            poses = poses[None]
        if poses.ndim != 3 or poses.shape[0] < 1 or poses.shape[1:] not in ((3, 3), (4, 4)):
            raise InvalidArgumentError(f"bad relative-state shape {poses.shape}")
        self.poses = poses

    @classmethod
    def identity(cls, n_robots: int, n: int = 3) -> "RelativeState":
        return cls(np.tile(np.eye(n + 1), (n_robots - 1, 1, 1)))

    @property
    def n(self) -> int:
        return self.poses.shape[1] - 1

    @property
    def n_robots(self) -> int:
        return self.poses.shape[0] + 1

    @property
    def tangent_dim(self) -> int:
        return lg.TANGENT_DIM[self.n]

    @property
    def dof(self) -> int:
        return self.tangent_dim * (self.n_robots - 1)

    def pose(self, robot_index: int) -> np.ndarray:
        """Pose of robot ``robot_index`` (0-based, 0 = reference) in robot 1's frame."""
        if robot_index == 0:
            return np.eye(self.n + 1)
        return self.poses[robot_index - 1]

    def copy(self) -> "RelativeState":
        return RelativeState(self.poses.copy())

    def oplus(self, dx) -> "RelativeState":
        return oplus(self, dx)


@dataclass
class RangeSnapshot:
    timestamp: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0.0):
            raise InvalidArgumentError("ranges must be finite and non-negative")


@dataclass(frozen=True)
class TagIndex:
    """Lookup from tag id to (robot index, offset) for a list of geometries."""

    robot_of: dict[int, int] = field(default_factory=dict)
    offset_of: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, geoms: Sequence[RobotGeometry]) -> "TagIndex":
        robot_of, offset_of = {}, {}
        for idx, g in enumerate(geoms):
            for tid, off in g.tags.items():
                if tid in robot_of:
                    raise InvalidArgumentError(f"tag {tid} appears on two robots")
                robot_of[tid] = idx
                offset_of[tid] = off
        return cls(robot_of, offset_of)

    def lookup(self, tag: int) -> tuple[int, np.ndarray]:
        if tag not in self.robot_of:
            raise InvalidArgumentError(f"unknown tag id {tag}")
        return self.robot_of[tag], self.offset_of[tag]


def oplus(x: RelativeState, dx) -> RelativeState:
    dx = np.asarray(dx, dtype=float)
    m = x.tangent_dim
    if dx.shape != (x.dof,):
        raise InvalidArgumentError(f"perturbation must have length {x.dof}, got {dx.shape}")
    out = x.poses.copy()
    for k in range(out.shape[0]):
        blk = dx[k * m:(k + 1) * m]
        if np.any(blk):
            out[k] = x.poses[k] @ lg.exp_map(blk)
    return RelativeState(out)


def _check_inputs(x: RelativeState, up: Sequence[VelocityInput], dt: float):
    if dt <= 0.0:
        raise InvalidArgumentError("dt must be positive")
    if len(up) != x.n_robots - 1:
        raise InvalidArgumentError(
            f"need one input per non-reference robot ({x.n_robots - 1}), got {len(up)}"
        )


def propagate(x: RelativeState, u1: VelocityInput, up: Sequence[VelocityInput], dt: float) -> RelativeState:
    """T_1p <- exp(-dt u1^) T_1p exp(dt up^) for every block."""
    _check_inputs(x, up, dt)
    E1 = lg.exp_map(-dt * u1.u)
    out = np.empty_like(x.poses)
    for k, inp in enumerate(up):
        out[k] = E1 @ x.poses[k] @ lg.exp_map(dt * inp.u)
    return RelativeState(out)


def process_jacobian(up: Sequence[VelocityInput], dt: float) -> np.ndarray:
    """Block-diagonal A with blocks Ad(exp(-dt up^)); independent of u1."""
    if dt <= 0.0:
        raise InvalidArgumentError("dt must be positive")
    blocks = [lg.adjoint(lg.exp_map(-dt * inp.u)) for inp in up]
    m = blocks[0].shape[0]
    A = np.zeros((m * len(blocks), m * len(blocks)))
    for k, B in enumerate(blocks):
        A[k * m:(k + 1) * m, k * m:(k + 1) * m] = B
    return A


def input_jacobians(x: RelativeState, u1: VelocityInput, up: Sequence[VelocityInput], dt: float):
    """First-order maps from input noise to the state perturbation.

    Returns ``(L1, [L2, ..., LN])``, each ``m(N-1) x m``. ``L1`` fills every
    block (the reference robot's noise moves all relative poses); ``Lp``
    fills only block ``p``.
    """
    _check_inputs(x, up, dt)
    m = x.tangent_dim
    K = x.n_robots - 1
    Jr1 = lg.right_jacobian(-dt * u1.u)
    L1 = np.zeros((m * K, m))
    Lp = []
    for k, inp in enumerate(up):
        B = x.poses[k] @ lg.exp_map(dt * inp.u)
        L1[k * m:(k + 1) * m] = -dt * lg.adjoint(lg.inverse(B)) @ Jr1
        L = np.zeros((m * K, m))
        L[k * m:(k + 1) * m] = dt * lg.right_jacobian(dt * inp.u)
        Lp.append(L)
    return L1, Lp


def process_noise(x: RelativeState, u1: VelocityInput, up: Sequence[VelocityInput], dt: float) -> np.ndarray:
    L1, Lp = input_jacobians(x, u1, up, dt)
    Qs = L1 @ u1.Q @ L1.T
    for L, inp in zip(Lp, up):
        Qs += L @ inp.Q @ L.T
    return Qs


def _tag_point(x: RelativeState, robot: int, offset: np.ndarray) -> np.ndarray:
    n = x.n
    h = np.append(offset[:n], 1.0)
    return (x.pose(robot) @ h)[:n]


def range_one(x: RelativeState, geoms: Sequence[RobotGeometry], edge: tuple[int, int]) -> float:
    idx = TagIndex.build(geoms)
    return _range_one(x, idx, edge)


def _range_one(x: RelativeState, idx: TagIndex, edge) -> float:
    p, ri = idx.lookup(edge[0])
    q, rj = idx.lookup(edge[1])
    return float(np.linalg.norm(_tag_point(x, p, ri) - _tag_point(x, q, rj)))


def range_stack(x: RelativeState, geoms: Sequence[RobotGeometry], graph: MeasurementGraph) -> np.ndarray:
    idx = TagIndex.build(geoms)
    return np.array([_range_one(x, idx, e) for e in graph.edges])


def meas_jacobian(x: RelativeState, geoms: Sequence[RobotGeometry], graph: MeasurementGraph) -> np.ndarray:
    """Rows ``rho^T D T_1p r~^odot`` at block p and the negative at block q."""
    idx = TagIndex.build(geoms)
    n, m = x.n, x.tangent_dim
    H = np.zeros((len(graph), x.dof))
    for row, (ti, tj) in enumerate(graph.edges):
        p, ri = idx.lookup(ti)
        q, rj = idx.lookup(tj)
        if p == q:
            # both tags on one rigid body: range is state independent
            continue
        diff = _tag_point(x, p, ri) - _tag_point(x, q, rj)
        dist = np.linalg.norm(diff)
        if dist < 1e-12:
            raise DegenerateGeometryError(f"tags {ti} and {tj} coincide; range Jacobian undefined")
        rho = diff / dist
        for robot, off, sign in ((p, ri, 1.0), (q, rj, -1.0)):
            if robot == 0:
                continue
            T = x.pose(robot)
            blk = sign * rho @ (T @ lg.odot(np.append(off[:n], 1.0)))[:n]
            H[row, (robot - 1) * m:robot * m] = blk
    return H
