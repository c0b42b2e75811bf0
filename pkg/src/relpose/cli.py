"""Command-line entry point: ``relpose init | sim | replay``.

Exit codes: 0 success, 2 configuration error, 3 data/log error,
4 numerical failure (degenerate geometry, no solution, singular update),
5 run-level failure (too many failed trials).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gils, logs, sim
from .config import LogPaths, RunConfig, emit_config, parse_config, parse_text, validate
from .errors import ConfigError, DataError, InvalidArgumentError, RelPoseError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_RUN = 0, 2, 3, 4, 5

log = logging.getLogger("relpose")


def _dump_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


# ---------------------------------------------------------------- reports


def timeseries_rows(res: sim.TrialResult, robot_ids):
    """Header and rows for one filter run."""
    pairs = robot_ids[1:]
    head = ["t"]
    if res.att is not None:
        for p in pairs:
            head += [f"att_{p}", f"pos_{p}"]
    if res.nees is not None:
        head.append("nees")
    if res.estimates is not None:
        for p in pairs:
            head += [f"x_{p}", f"y_{p}", f"z_{p}"]
    if res.weights is not None:
        head += [f"w_{i}" for i in range(res.weights.shape[1])]
    rows = []
    for k, t in enumerate(res.times):
        row = [t]
        if res.att is not None:
            for j in range(len(pairs)):
                row += [res.att[k, j], res.pos[k, j]]
        if res.nees is not None:
            row.append(res.nees[k])
        if res.estimates is not None:
            for j in range(len(pairs)):
                row += list(res.estimates[k, j, :3, 3])
        if res.weights is not None:
            row += list(res.weights[k])
        rows.append([repr(float(v)) for v in row])
    return head, rows


def write_timeseries(path: Path, res: sim.TrialResult, robot_ids):
    head, rows = timeseries_rows(res, robot_ids)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(head)
        w.writerows(rows)


def _write_trial(out: Path, prefix: str, results: dict, robot_ids):
    for name, res in results.items():
        if res.failed:
            (out / f"{prefix}_{name}.failed").write_text(res.error + "\n")
            continue
        write_timeseries(out / f"{prefix}_{name}.csv", res, robot_ids)


def _export_logs(out: Path, cfg: RunConfig, data: sim.TrialData, trial: int):
    d = out / "logs" / f"trial_{trial:03d}"
    d.mkdir(parents=True, exist_ok=True)
    ids = logs.robot_ids(data.geoms)
    static_t = [s.timestamp for s in data.static]
    logs.write_ranges(d / "ranges.csv", data.graph, static_t + list(data.times[1:]),
                      np.concatenate([np.stack([s.values for s in data.static]), data.ranges]))
    logs.write_velocities(d / "velocities.csv", ids, data.times[:-1], data.u)
    logs.write_truth(d / "truth.csv", ids[1:], data.times, data.truth)
    paths = LogPaths("ranges.csv", "velocities.csv", "truth.csv", 0.0)
    rc = RunConfig("replay", cfg.scenario, cfg.filter, cfg.filters, cfg.seed, 1, "replay", cfg.transient, paths,
                   trial)
    (d / "replay.yaml").write_text(emit_config(rc))


# ---------------------------------------------------------------- commands


def cmd_sim(cfg: RunConfig, export_logs: bool = False) -> int:
    validate(cfg)
    cfg.scenario.seed = cfg.seed
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = logs.robot_ids(cfg.scenario.geometries)
    status = "ok"
    try:
        report = sim.run_monte_carlo(cfg.scenario, cfg.trials, cfg.filters, cfg.filter,
                                     transient=cfg.transient, keep_estimates=True)
        trials, summary = report.trials, report.summary
    except sim.RunFailure as exc:
        trials, summary, status = exc.trials, exc.summary, "failed"
    for t in trials:
        _write_trial(out, f"trial_{t['trial']:03d}", t["results"], ids)
        if export_logs:
            _export_logs(out, cfg, sim.simulate_trial(cfg.scenario, cfg.seed, t["trial"]), t["trial"])
    summary = {"status": status, "mode": "sim", "seed": cfg.seed, **summary}
    _dump_json(out / "summary.json", summary)
    _dump_json(out / "timing.json", sim.timing_summary(trials, cfg.filters))
    _print_summary(summary)
    if status != "ok":
        print(f"relpose: error: {summary['failed_fraction']:.0%} of trial runs failed; outputs are partial",
              file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def load_trial_data(cfg: RunConfig) -> sim.TrialData:
    sc = cfg.scenario
    geoms, graph = sc.geometries, sc.graph()
    ids = logs.robot_ids(geoms)
    snaps = logs.read_ranges(cfg.logs.ranges, graph)
    cut = 0.0 if cfg.logs.static_until is None else cfg.logs.static_until
    static = [s for s in snaps if s.timestamp <= cut]
    moving = [s for s in snaps if s.timestamp > cut]
    if not static:
        raise DataError(f"{cfg.logs.ranges}: no static snapshots at or before t={cut!r}")
    if not moving:
        raise DataError(f"{cfg.logs.ranges}: no snapshots after t={cut!r}")
    times = np.array([static[-1].timestamp] + [s.timestamp for s in moving])
    if np.any(np.diff(times) <= 0.0):
        raise DataError(f"{cfg.logs.ranges}: snapshot timestamps must increase")
    ranges = np.stack([s.values for s in moving])
    streams = logs.read_velocities(cfg.logs.velocities, ids)
    u = logs.hold_inputs(streams, ids, times[:-1])
    truth = None
    if cfg.logs.truth:
        tt, tp = logs.read_truth(cfg.logs.truth, ids[1:])
        pos = {t: k for k, t in enumerate(tt)}
        missing = [t for t in times if t not in pos]
        if missing:
            raise DataError(f"{cfg.logs.truth}: no ground truth at t={missing[0]!r}")
        truth = tp[[pos[t] for t in times]]
    return sim.TrialData(list(geoms), graph, static, times, ranges, u, sc.input_cov(), truth)


def cmd_replay(cfg: RunConfig) -> int:
    validate(cfg)
    data = load_trial_data(cfg)
    seed = cfg.seed if cfg.seed is not None else 0
    results, init = sim.run_filters(data, cfg.filters, cfg.filter, seed, cfg.trial, keep_estimates=True)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_trial(out, "replay", results, logs.robot_ids(data.geoms))
    trial = [{"trial": cfg.trial, "results": results, "n_modes": len(init.mixture), "error": None}]
    summary = sim.summarize(trial, cfg.filters, cfg.scenario, cfg.transient)
    summary = {"status": "ok", "mode": "replay", "n_modes": len(init.mixture), **summary}
    _dump_json(out / "summary.json", summary)
    _dump_json(out / "timing.json", sim.timing_summary(trial, cfg.filters))
    _print_summary(summary)
    return EXIT_OK


def mixture_report(init: gils.InitResult, robot_ids) -> dict:
    modes = []
    for i, (m, c) in enumerate(zip(init.mixture.modes, init.candidates)):
        poses = []
        for rid, T in zip(robot_ids[1:], m.mean.poses):
            poses.append({
                "robot": rid,
                "yaw": float(np.arctan2(T[1, 0], T[0, 0])),
                "x": float(T[0, 3]), "y": float(T[1, 3]), "z": float(T[2, 3]),
                "rotation": T[:3, :3].tolist(),
            })
        modes.append({"index": i, "weight": float(m.weight), "cost": float(m.cost),
                      "geometric_modes": [int(a) + 1 for a in c.source], "poses": poses,
                      "covariance": np.asarray(m.cov).tolist()})
    return {"n_geometric": init.n_geometric, "n_converged": init.n_converged, "n_modes": len(modes),
            "modes": modes}


def cmd_init(cfg: RunConfig) -> int:
    validate(cfg)
    sc = cfg.scenario
    snaps = logs.read_ranges(cfg.logs.ranges, sc.graph())
    if cfg.logs.static_until is not None:
        snaps = [s for s in snaps if s.timestamp <= cfg.logs.static_until]
    if not snaps:
        raise DataError("no static range snapshots to initialize from")
    init = gils.initialize(snaps, sc.geometries, sc.graph(), cfg.filter.gils)
    rep = mixture_report(init, logs.robot_ids(sc.geometries))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "mixture.json", rep)
    print(f"{rep['n_modes']} modes ({rep['n_geometric']} geometric, {rep['n_converged']} converged)")
    for m in rep["modes"]:
        print(f"  mode {m['index']}: cost {m['cost']:.6g}")
    return EXIT_OK


def _print_summary(summary: dict):
    for name, e in summary["filters"].items():
        parts = [f"{name}:"]
        if e.get("median_attitude_rmse") is not None:
            parts.append(f"median RMSE att {e['median_attitude_rmse']:.4f} rad, pos {e['median_position_rmse']:.4f} m")
        if "nees" in e and e["nees"]["fraction_inside"] is not None:
            lo, hi = e["nees"]["bounds"]
            parts.append(f"NEES in [{lo:.2f}, {hi:.2f}] for {e['nees']['fraction_inside']:.0%} of steps")
        if e["failed"]:
            parts.append(f"{e['failed']} failed")
        print(" ".join(parts))


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relpose", description="Range-based multi-robot relative pose estimation.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("init", "GI-LS initialization from a static range log"),
                        ("sim", "Monte-Carlo simulation"),
                        ("replay", "run filters over recorded logs")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", metavar="PATH", help="YAML run configuration")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", type=int, metavar="U64", help="master seed")
        p.add_argument("--filters", metavar="LIST", help="comma-separated subset of ekf,gsf,pf")
        p.add_argument("--trials", type=int, metavar="N", help="Monte-Carlo trial count")
        if name == "sim":
            p.add_argument("--export-logs", action="store_true",
                           help="also write replayable CSV logs for every trial")
        if name in ("init", "replay"):
            p.add_argument("--ranges", metavar="CSV", help="range log (overrides the config)")
        if name == "replay":
            p.add_argument("--velocities", metavar="CSV", help="velocity log (overrides the config)")
            p.add_argument("--truth", metavar="CSV", help="ground-truth log (optional)")
    return ap


def load_config(args) -> RunConfig:
    if args.config:
        cfg = parse_config(args.config, args.command)
        base = Path(args.config).parent
    else:
        cfg = parse_text(f"mode: {args.command}\n")
        base = None
    if args.out:
        cfg.out = args.out
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.filters:
        names = [f.strip() for f in args.filters.split(",") if f.strip()]
        bad = [f for f in names if f not in sim.FILTERS]
        if bad or not names:
            raise ConfigError(f"--filters: unknown filter(s) {bad}; choose from {','.join(sim.FILTERS)}")
        cfg.filters = names
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be at least 1")
        cfg.trials = args.trials
    for k in ("ranges", "velocities", "truth"):
        v = getattr(args, k, None)
        if v:
            setattr(cfg.logs, k, str(Path(v).resolve()))
    if base is not None:
        # paths written in a config file are relative to that file
        for k in ("ranges", "velocities", "truth"):
            v = getattr(cfg.logs, k)
            if v and not getattr(args, k, None) and not Path(v).is_absolute():
                setattr(cfg.logs, k, str(base / v))
        if not args.out and not Path(cfg.out).is_absolute():
            cfg.out = str(base / cfg.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "sim":
            return cmd_sim(cfg, args.export_logs)
        if args.command == "replay":
            return cmd_replay(cfg)
        return cmd_init(cfg)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"relpose: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"relpose: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except sim.RunFailure as exc:
        print(f"relpose: error: {exc}", file=sys.stderr)
        return EXIT_RUN
    except RelPoseError as exc:
        print(f"relpose: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
