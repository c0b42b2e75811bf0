"""Closed-form planar enumeration of relative-pose ambiguities.

For a reference robot (tags tau1, tau2) and a target robot (tags tau_i,
tau_j), four ranges admit up to four planar poses:

* modes 1 and 2: the two circle-intersection branches (+h / -h);
* modes 3 and 4: modes 1 and 2 reflected about the tau_i--tau_j axis with
  the heading turned by pi, i.e. the target's two tags trade places.

Each robot's solve runs in a canonical tag frame (origin at the tag
midpoint, x along tag2 - tag1) and is mapped back to body frames at the
end. In that frame the reflection swaps the tags exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import liegroup as lg
from .errors import InvalidArgumentError, NoSolutionError
from .models import MeasurementGraph, RelativeState, RobotGeometry


@dataclass(frozen=True)
class PairRanges:
    """Ranges tau1-tau_i, tau1-tau_j, tau2-tau_i, tau2-tau_j (m)."""

    y1i: float
    y1j: float
    y2i: float
    y2j: float

    def __post_init__(self):
        vals = np.array([self.y1i, self.y1j, self.y2i, self.y2j], dtype=float)
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0.0):
            raise InvalidArgumentError("pair ranges must be positive and finite")


@dataclass
class PlanarModeSet:
    """Four SE(2) candidate poses of the target in the reference body frame."""

    modes: list
    valid: np.ndarray

    @property
    def valid_modes(self) -> list[tuple[int, np.ndarray]]:
        return [(a + 1, T) for a, T in enumerate(self.modes) if self.valid[a]]


@dataclass
class ModeCombination:
    index: int
    state: RelativeState
    mode_indices: tuple[int, ...]


def reflect_about_axis(p, axis, anchor=(0.0, 0.0)) -> np.ndarray:
    """Mirror ``p`` about the line through ``anchor`` with direction ``axis``."""
    p = np.asarray(p, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    b, a = np.asarray(axis, dtype=float)
    den = a * a + b * b
    if den == 0.0:
        raise InvalidArgumentError("reflection axis must be nonzero")
    dmat = np.array([[b * b - a * a, 2.0 * a * b], [2.0 * a * b, a * a - b * b]])
    return anchor + dmat @ (p - anchor) / den


def _canonical(geom: RobotGeometry) -> np.ndarray:
    """SE(2) pose of the canonical tag frame in the robot body frame."""
    t1, t2 = (np.asarray(v[:2], dtype=float) for v in list(geom.tags.values())[:2])
    d = t2 - t1
    if np.linalg.norm(d) <= 0.0:
        raise InvalidArgumentError(f"robot {geom.robot_id}: tags coincide in the plane")
    return lg.make_pose(lg.rot2(math.atan2(d[1], d[0])), 0.5 * (t1 + t2))


def _planar_baseline(geom: RobotGeometry) -> float:
    t1, t2 = (np.asarray(v[:2], dtype=float) for v in list(geom.tags.values())[:2])
    return float(np.linalg.norm(t2 - t1))


def solve_pair(geom_ref: RobotGeometry, geom_tgt: RobotGeometry, r: PairRanges,
               range_std: float = 0.0, n_sigma: float = 4.0) -> PlanarModeSet:
    """Enumerate the four planar poses of ``geom_tgt`` relative to ``geom_ref``.

    ``range_std`` is the standard deviation of each input range. The
    circle-intersection discriminant y1^2 - e^2 gets an extra tolerance of
    ``n_sigma`` times its first-order standard deviation, so noisy ranges
    that barely miss each other are clamped to a tangent solution instead of
    being discarded.
    """
    d = _planar_baseline(geom_ref)
    s = _planar_baseline(geom_tgt)
    tau1 = np.array([-0.5 * d, 0.0])
    ti_c = np.array([-0.5 * s, 0.0])
    n1 = np.array([1.0, 0.0])
    n1p = np.array([0.0, 1.0])

    valid = True
    e, h = {}, {}
    for mu, y1, y2 in (("i", r.y1i, r.y2i), ("j", r.y1j, r.y2j)):
        e[mu] = (y1 * y1 - y2 * y2 + d * d) / (2.0 * d)
        disc = y1 * y1 - e[mu] ** 2
        tol = max(1e-9 * max(y1 * y1, d * d), 1e-12)
        if range_std > 0.0:
            g1 = 2.0 * y1 * (1.0 - e[mu] / d)
            g2 = 2.0 * e[mu] * y2 / d
            tol += n_sigma * range_std * math.hypot(g1, g2)
        if disc < -tol:
            valid = False
        h[mu] = math.sqrt(disc) if disc > 0.0 else 0.0

    if not valid:
        return PlanarModeSet([None] * 4, np.zeros(4, dtype=bool))

    # the target's tag vector r^{tau_i tau_j} is (-s, 0) in its canonical frame
    phi_rp = math.pi
    T1c = _canonical(geom_ref)
    Tpc_inv = lg.inverse(_canonical(geom_tgt))
    modes = [None] * 4
    for alpha, sign in ((0, 1.0), (1, -1.0)):
        P_i = tau1 + e["i"] * n1 + sign * h["i"] * n1p
        P_j = tau1 + e["j"] * n1 + sign * h["j"] * n1p
        rij = P_i - P_j
        phi_r1 = math.atan2(rij[1], rij[0])
        C = lg.rot2(phi_r1 - phi_rp)
        pos = P_i - C @ ti_c
        axis = P_j - P_i
        if np.linalg.norm(axis) == 0.0:
            axis = C @ np.array([1.0, 0.0])
        flip_pos = reflect_about_axis(pos, axis, P_i)
        flip_C = lg.rot2(math.pi) @ C
        for idx, (CC, pp) in ((alpha, (C, pos)), (alpha + 2, (flip_C, flip_pos))):
            modes[idx] = T1c @ lg.make_pose(CC, pp) @ Tpc_inv
    return PlanarModeSet(modes, np.ones(4, dtype=bool))


def _edge_value(ybar: np.ndarray, graph: MeasurementGraph, a: int, b: int) -> float:
    for k, (p, q) in enumerate(graph.edges):
        if (p, q) == (a, b) or (p, q) == (b, a):
            return float(ybar[k])
    raise InvalidArgumentError(f"measurement graph lacks edge ({a}, {b}) needed by the geometric solver")


def pair_ranges(ybar, graph: MeasurementGraph, geom_ref: RobotGeometry, geom_tgt: RobotGeometry) -> PairRanges:
    t1, t2 = geom_ref.tag_ids[:2]
    ti, tj = geom_tgt.tag_ids[:2]
    return PairRanges(
        _edge_value(ybar, graph, t1, ti),
        _edge_value(ybar, graph, t1, tj),
        _edge_value(ybar, graph, t2, ti),
        _edge_value(ybar, graph, t2, tj),
    )


def enumerate_combinations(per_pair: Sequence[PlanarModeSet]) -> list[ModeCombination]:
    """Cartesian product of valid modes, robot 2 varying fastest."""
    if not per_pair:
        raise InvalidArgumentError("need at least one mode set")
    choices = []
    for k, ms in enumerate(per_pair):
        vm = ms.valid_modes
        if not vm:
            raise NoSolutionError(f"no valid geometric mode for robot {k + 2}")
        choices.append(vm)
    out = []
    for i, combo in enumerate(itertools.product(*reversed(choices))):
        combo = combo[::-1]
        state = RelativeState(np.stack([T for _, T in combo]))
        out.append(ModeCombination(i, state, tuple(a for a, _ in combo)))
    return out


def geometric_modes(ybar, geoms: Sequence[RobotGeometry], graph: MeasurementGraph,
                    range_std: float = 0.0, n_sigma: float = 4.0) -> list[ModeCombination]:
    per_pair = [
        solve_pair(geoms[0], g, pair_ranges(ybar, graph, geoms[0], g), range_std, n_sigma)
        for g in geoms[1:]
    ]
    return enumerate_combinations(per_pair)
