"""YAML run configuration: parsing with line-numbered errors, defaults and emission.

Schema (every key optional unless noted)::

    mode: sim | replay | init          # required; the CLI subcommand fills it in
    seed: 7                            # required for sim
    trials: 30
    filters: [ekf, gsf, pf]
    out: results/
    scenario:
      n_robots: 3
      rate: 50.0
      sigma: 0.1
      duration: 30.0
      warmup: 4.0
      gamma: null
      gyro_std: 0.02
      velocity_std: 0.05
      tags: [[0.17, 0.17, 0.0], [0.17, -0.17, 0.0]]   # same layout on every robot
      robots:                                        # or explicit per-robot layouts
        - {id: 1, tags: {1: [0.17, 0.17, 0.0], 2: [0.17, -0.17, 0.0]}}
      trajectory: {speed_std: 0.5, ...}
    filter:
      particles: 1500
      pf_input_scale: 1.0
      pf_roughen: [0.0, 0.0]
      prune: false
      transient: 2.0
      gils: {merge_tol: 0.1, ...}
    logs:                               # replay / init inputs
      ranges: ranges.csv
      velocities: velocities.csv
      truth: truth.csv
      static_until: 0.0
    trial: 0                            # replay: index of the random streams (EKF mode pick, PF)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, RelPoseError
from .gils import GilsOptions
from .models import RobotGeometry
from .sim import FILTERS, FilterConfig, ScenarioConfig, TrajectoryConfig

MODES = ("sim", "replay", "init")


@dataclass
class LogPaths:
    ranges: str | None = None
    velocities: str | None = None
    truth: str | None = None
    static_until: float | None = None  # replay default 0.0; init default: every snapshot


@dataclass(eq=False)
class RunConfig:
    mode: str
    scenario: ScenarioConfig
    filter: FilterConfig = field(default_factory=FilterConfig)
    filters: list[str] = field(default_factory=lambda: list(FILTERS))
    seed: int | None = None
    trials: int = 1
    out: str = "out"
    transient: float = 2.0
    logs: LogPaths = field(default_factory=LogPaths)
    trial: int = 0

    def __eq__(self, other):
        return isinstance(other, RunConfig) and to_dict(self) == to_dict(other)


# ---------------------------------------------------------------- YAML with line numbers


class _Node:
    """A parsed value plus the line it came from."""

    __slots__ = ("value", "line")

    def __init__(self, value, line):
        self.value = value
        self.line = line


def _wrap(node: yaml.Node) -> _Node:
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = yaml.safe_load(yaml.serialize(k))
            out[key] = (_wrap(v), k.start_mark.line + 1)
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_wrap(v) for v in node.value], line)
    return _Node(yaml.safe_load(yaml.serialize(node)), line)


def _plain(n: _Node):
    if isinstance(n.value, dict):
        return {k: _plain(v) for k, (v, _) in n.value.items()}
    if isinstance(n.value, list):
        return [_plain(v) for v in n.value]
    return n.value


def _mapping(n: _Node, where: str) -> dict:
    if n.value is None:
        return {}
    if not isinstance(n.value, dict):
        raise ConfigError(f"line {n.line}: '{where}' must be a mapping")
    return n.value


def _check_keys(m: dict, allowed, where: str):
    for k, (_, line) in m.items():
        if k not in allowed:
            raise ConfigError(f"line {line}: unknown key '{k}' in {where}; allowed: {', '.join(sorted(allowed))}")


def _fill(cls, m: dict, where: str, nested=None, skip=()):
    """Instantiate dataclass ``cls`` from mapping ``m``; ``nested`` maps field -> parser."""
    nested = nested or {}
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    _check_keys(m, names | set(nested), where)
    kwargs = {}
    for k, (v, line) in m.items():
        if k in nested:
            kwargs[k] = nested[k](v)
            continue
        val = _plain(v)
        if isinstance(val, list):
            val = tuple(val)
        kwargs[k] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, RelPoseError) as exc:
        line = min((ln for _, ln in m.values()), default=0)
        raise ConfigError(f"line {line}: invalid {where}: {exc}") from exc


def _geometries(n: _Node) -> list[RobotGeometry]:
    if not isinstance(n.value, list):
        raise ConfigError(f"line {n.line}: 'scenario.robots' must be a list")
    out = []
    for item in n.value:
        m = _mapping(item, "scenario.robots[]")
        _check_keys(m, {"id", "tags"}, "scenario.robots[]")
        if "id" not in m or "tags" not in m:
            raise ConfigError(f"line {item.line}: each robot needs 'id' and 'tags'")
        tags = _plain(m["tags"][0])
        try:
            out.append(RobotGeometry(int(_plain(m["id"][0])), {int(k): np.asarray(v, dtype=float)
                                                              for k, v in tags.items()}))
        except (TypeError, ValueError, AttributeError, RelPoseError) as exc:
            raise ConfigError(f"line {item.line}: invalid robot geometry: {exc}") from exc
    return out


def _scenario(n: _Node) -> ScenarioConfig:
    m = dict(_mapping(n, "scenario"))
    geoms = None
    if "robots" in m:
        geoms = _geometries(m.pop("robots")[0])
    tags = None
    if "tags" in m:
        tags = _plain(m.pop("tags")[0])
    nested = {"trajectory": lambda v: _fill(TrajectoryConfig, _mapping(v, "scenario.trajectory"),
                                            "scenario.trajectory")}
    sc = _fill(ScenarioConfig, m, "scenario", nested, skip=("geometries", "seed"))
    if geoms is not None and tags is not None:
        raise ConfigError(f"line {n.line}: give either 'scenario.tags' or 'scenario.robots', not both")
    if tags is not None or geoms is not None:
        from .sim import default_geometries

        try:
            sc.geometries = geoms if geoms is not None else default_geometries(sc.n_robots, tags)
            sc.__post_init__()
        except (TypeError, ValueError, RelPoseError) as exc:
            raise ConfigError(f"line {n.line}: invalid scenario geometry: {exc}") from exc
    return sc


def _filter_cfg(n: _Node) -> tuple[FilterConfig, float]:
    m = dict(_mapping(n, "filter"))
    transient = 2.0
    if "transient" in m:
        transient = float(_plain(m.pop("transient")[0]))
    nested = {"gils": lambda v: _fill(GilsOptions, _mapping(v, "filter.gils"), "filter.gils")}
    return _fill(FilterConfig, m, "filter", nested), transient


TOP_KEYS = {"mode", "seed", "trials", "filters", "out", "scenario", "filter", "logs", "trial"}


def parse_text(text: str, source: str = "<config>", mode: str | None = None) -> RunConfig:
    """Parse YAML text. ``mode`` supplies the run mode when the file has none."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: malformed YAML: {getattr(exc, 'problem', exc)}") from exc
    if root is None:
        raise ConfigError(f"{source}: empty configuration; the 'mode' field is required")
    top = _mapping(_wrap(root), "top level")
    _check_keys(top, TOP_KEYS, "top level")

    def get(key, default=None):
        return _plain(top[key][0]) if key in top else default

    file_mode = get("mode")
    if mode is not None and file_mode is not None and file_mode != mode:
        raise ConfigError(f"line {top['mode'][1]}: config says mode '{file_mode}' but '{mode}' was requested")
    mode = file_mode if file_mode is not None else mode
    if mode is None:
        raise ConfigError(f"{source}: missing required field 'mode'")
    if mode not in MODES:
        raise ConfigError(f"line {top['mode'][1]}: mode must be one of {', '.join(MODES)}")
    scenario = _scenario(top["scenario"][0]) if "scenario" in top else ScenarioConfig()
    fcfg, transient = _filter_cfg(top["filter"][0]) if "filter" in top else (FilterConfig(), 2.0)
    logs = _fill(LogPaths, _mapping(top["logs"][0], "logs"), "logs") if "logs" in top else LogPaths()

    filters = get("filters", list(FILTERS))
    if isinstance(filters, str):
        filters = [f.strip() for f in filters.split(",") if f.strip()]
    for f in filters:
        if f not in FILTERS:
            raise ConfigError(f"line {top['filters'][1]}: unknown filter '{f}'")
    seed = get("seed")
    if seed is not None and (not isinstance(seed, int) or seed < 0):
        raise ConfigError(f"line {top['seed'][1]}: seed must be a non-negative integer")
    trials = get("trials", 1)
    if not isinstance(trials, int) or trials < 1:
        raise ConfigError(f"line {top['trials'][1]}: trials must be a positive integer")
    trial = get("trial", 0)
    if not isinstance(trial, int) or trial < 0:
        raise ConfigError(f"line {top['trial'][1]}: trial must be a non-negative integer")
    return RunConfig(mode, scenario, fcfg, list(filters), seed, trials, str(get("out", "out")), transient, logs,
                     trial)


def parse_config(path, mode: str | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_text(p.read_text(), str(p), mode)


def validate(cfg: RunConfig, base: Path | None = None):
    """Mode-specific requirements; relative log paths resolve against ``base``."""
    if cfg.mode == "sim" and cfg.seed is None:
        raise ConfigError("missing required field 'seed' for sim mode")
    if cfg.mode in ("replay", "init"):
        need = ["ranges"] + (["velocities"] if cfg.mode == "replay" else [])
        for k in need:
            v = getattr(cfg.logs, k)
            if v is None:
                raise ConfigError(f"missing required field 'logs.{k}' for {cfg.mode} mode")
        for k in ("ranges", "velocities", "truth"):
            v = getattr(cfg.logs, k)
            if v is None:
                continue
            p = Path(v) if base is None or Path(v).is_absolute() else base / v
            if not p.is_file():
                raise ConfigError(f"logs.{k}: file not found: {p}")
            setattr(cfg.logs, k, str(p))
    return cfg


# ---------------------------------------------------------------- emission


def _dc(obj, skip=()):
    d = {}
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _dc(v)
        elif isinstance(v, tuple):
            v = list(v)
        d[f.name] = v
    return d


def to_dict(cfg: RunConfig) -> dict:
    sc = _dc(cfg.scenario, skip=("geometries", "seed"))
    sc["robots"] = [{"id": g.robot_id, "tags": {int(k): [float(x) for x in v] for k, v in g.tags.items()}}
                    for g in cfg.scenario.geometries]
    filt = _dc(cfg.filter)
    filt["transient"] = cfg.transient
    out = {"mode": cfg.mode}
    if cfg.seed is not None:
        out["seed"] = cfg.seed
    out.update({"trials": cfg.trials, "filters": list(cfg.filters), "out": cfg.out,
                "scenario": sc, "filter": filt, "logs": _dc(cfg.logs), "trial": cfg.trial})
    return out


def emit_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)
