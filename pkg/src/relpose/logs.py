"""CSV sensor logs: export from simulation and import for replay.

Formats (header row first, floats written with ``repr`` so export followed
by import is lossless):

* ranges:     ``t,tagA,tagB,range_m``, one row per edge per snapshot
* velocities: ``t,robotId,wx,wy,wz,vx,vy,vz``
* truth:      ``t,robotId,c00,c01,c02,c10,c11,c12,c20,c21,c22,x,y,z``, pose of
  robot ``robotId`` in the frame of robot 1
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .models import MeasurementGraph, RangeSnapshot, RobotGeometry

RANGE_HEADER = ["t", "tagA", "tagB", "range_m"]
VELOCITY_HEADER = ["t", "robotId", "wx", "wy", "wz", "vx", "vy", "vz"]
TRUTH_HEADER = ["t", "robotId"] + [f"c{i}{j}" for i in range(3) for j in range(3)] + ["x", "y", "z"]


def _writer(f):
    return csv.writer(f, lineterminator="\n")


def write_ranges(path, graph: MeasurementGraph, times: Sequence[float], values: np.ndarray):
    with open(path, "w", newline="") as f:
        w = _writer(f)
        w.writerow(RANGE_HEADER)
        for t, y in zip(times, values):
            for (a, b), r in zip(graph.edges, y):
                w.writerow([repr(float(t)), a, b, repr(float(r))])


def write_velocities(path, robot_ids: Sequence[int], times: Sequence[float], u: np.ndarray):
    with open(path, "w", newline="") as f:
        w = _writer(f)
        w.writerow(VELOCITY_HEADER)
        for t, uk in zip(times, u):
            for rid, up in zip(robot_ids, uk):
                w.writerow([repr(float(t)), rid] + [repr(float(v)) for v in up])


def write_truth(path, robot_ids: Sequence[int], times: Sequence[float], poses: np.ndarray):
    """``poses`` is (K, N-1, 4, 4); ``robot_ids`` names robots 2..N."""
    with open(path, "w", newline="") as f:
        w = _writer(f)
        w.writerow(TRUTH_HEADER)
        for t, Tk in zip(times, poses):
            for rid, T in zip(robot_ids, Tk):
                vals = list(T[:3, :3].ravel()) + list(T[:3, 3])
                w.writerow([repr(float(t)), rid] + [repr(float(v)) for v in vals])


def _rows(path, header: list[str]):
    """Yield ``(line_number, fields)`` after checking the header."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"log file not found: {p}")
    with open(p, newline="") as f:
        r = csv.reader(f)
        try:
            head = next(r)
        except StopIteration:
            raise DataError(f"{p}: empty log") from None
        if [h.strip() for h in head] != header:
            raise DataError(f"{p}:1: expected header {','.join(header)}")
        for row in r:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{p}:{r.line_num}: expected {len(header)} fields, got {len(row)}")
            yield r.line_num, row


def _num(p, line, s, kind=float):
    try:
        v = kind(s)
    except ValueError:
        raise DataError(f"{p}:{line}: cannot parse {s!r}") from None
    if kind is float and not np.isfinite(v):
        raise DataError(f"{p}:{line}: non-finite value {s!r}")
    return v


def read_ranges(path, graph: MeasurementGraph) -> list[RangeSnapshot]:
    """Group rows by timestamp into snapshots ordered like ``graph.edges``."""
    slot = {}
    for k, (a, b) in enumerate(graph.edges):
        slot[(a, b)] = k
        slot[(b, a)] = k
    snaps = []
    cur_t, cur, cur_line = None, None, 0

    def close():
        missing = [graph.edges[k] for k in range(len(graph)) if np.isnan(cur[k])]
        if missing:
            raise DataError(f"{path}:{cur_line}: snapshot at t={cur_t!r} lacks edges {missing}")
        snaps.append(RangeSnapshot(cur_t, cur))

    for line, row in _rows(path, RANGE_HEADER):
        t = _num(path, line, row[0])
        a, b = _num(path, line, row[1], int), _num(path, line, row[2], int)
        r = _num(path, line, row[3])
        if cur_t is not None and t < cur_t:
            raise DataError(f"{path}:{line}: timestamp {t!r} goes back in time (previous {cur_t!r})")
        if t != cur_t:
            if cur is not None:
                close()
            cur_t, cur, cur_line = t, np.full(len(graph), np.nan), line
        k = slot.get((a, b))
        if k is None:
            raise DataError(f"{path}:{line}: edge ({a}, {b}) is not in the measurement graph")
        if not np.isnan(cur[k]):
            raise DataError(f"{path}:{line}: duplicate edge ({a}, {b}) at t={t!r}")
        if r < 0.0:
            raise DataError(f"{path}:{line}: negative range")
        cur[k] = r
    if cur is not None:
        close()
    if not snaps:
        raise DataError(f"{path}: no range rows")
    return snaps


def read_velocities(path, robot_ids: Sequence[int]) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per robot: (timestamps, inputs (n, 6)). Timestamps must not decrease per robot."""
    rows = {r: ([], []) for r in robot_ids}
    for line, row in _rows(path, VELOCITY_HEADER):
        t = _num(path, line, row[0])
        rid = _num(path, line, row[1], int)
        if rid not in rows:
            raise DataError(f"{path}:{line}: unknown robot id {rid}")
        ts, us = rows[rid]
        if ts and t < ts[-1]:
            raise DataError(f"{path}:{line}: timestamp {t!r} for robot {rid} goes back in time")
        ts.append(t)
        us.append([_num(path, line, v) for v in row[2:]])
    return {r: (np.array(ts, dtype=float), np.array(us, dtype=float).reshape(-1, 6)) for r, (ts, us) in rows.items()}


def read_truth(path, robot_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Return (times, poses (K, N-1, 4, 4)); every timestamp must list robots 2..N in order."""
    times, poses = [], []
    K = len(robot_ids)
    block = []
    for line, row in _rows(path, TRUTH_HEADER):
        t = _num(path, line, row[0])
        rid = _num(path, line, row[1], int)
        if rid != robot_ids[len(block)]:
            raise DataError(f"{path}:{line}: expected robot {robot_ids[len(block)]}, got {rid}")
        if block and t != block[0][0]:
            raise DataError(f"{path}:{line}: incomplete truth block at t={block[0][0]!r}")
        if not block and times and t < times[-1]:
            raise DataError(f"{path}:{line}: timestamp {t!r} goes back in time")
        vals = [_num(path, line, v) for v in row[2:]]
        T = np.eye(4)
        T[:3, :3] = np.reshape(vals[:9], (3, 3))
        T[:3, 3] = vals[9:]
        block.append((t, T))
        if len(block) == K:
            times.append(t)
            poses.append(np.stack([T for _, T in block]))
            block = []
    if block:
        raise DataError(f"{path}: truth log ends mid-block")
    return np.array(times), np.array(poses).reshape(-1, K, 4, 4)


def hold_inputs(streams: dict[int, tuple[np.ndarray, np.ndarray]], robot_ids: Sequence[int],
                starts: np.ndarray) -> np.ndarray:
    """Zero-order hold: for each start time, every robot's latest input at or before it (zero if none)."""
    out = np.zeros((len(starts), len(robot_ids), 6))
    for j, rid in enumerate(robot_ids):
        ts, us = streams[rid]
        if len(ts) == 0:
            continue
        idx = np.searchsorted(ts, starts, side="right") - 1
        ok = idx >= 0
        out[ok, j] = us[idx[ok]]
    return out


def robot_ids(geoms: Sequence[RobotGeometry]) -> list[int]:
    return [g.robot_id for g in geoms]
