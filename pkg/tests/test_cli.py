import csv
import json

import numpy as np
import pytest

from relpose import cli, config, logs, sim
from relpose import liegroup as lg
from relpose import models as M
from relpose.errors import ConfigError, DataError

SIM_YAML = """\
mode: sim
seed: 3
trials: 1
filters: [ekf, gsf, pf]
scenario:
  duration: 3.0
  warmup: 1.0
filter:
  particles: 200
"""


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


# ---------------------------------------------------------------- config


def test_minimal_config_gets_defaults():
    cfg = config.parse_text("mode: sim\nseed: 1\n")
    assert cfg.scenario.rate == 50.0
    assert cfg.scenario.sigma == 0.1
    assert cfg.scenario.n_robots == 3
    assert cfg.filter.particles == 1500


def test_config_round_trip():
    cfg = config.parse_text(SIM_YAML)
    again = config.parse_text(config.emit_config(cfg))
    assert again == cfg
    assert config.emit_config(again) == config.emit_config(cfg)


def test_round_trip_keeps_custom_robots():
    text = """\
mode: replay
scenario:
  n_robots: 2
  robots:
    - {id: 1, tags: {1: [0.2, 0.1, 0.0], 2: [0.2, -0.1, 0.0]}}
    - {id: 2, tags: {3: [0.3, 0.1, 0.0], 4: [0.3, -0.1, 0.0]}}
"""
    cfg = config.parse_text(text)
    assert config.parse_text(config.emit_config(cfg)) == cfg
    assert cfg.scenario.geometries[1].tags[3].tolist() == [0.3, 0.1, 0.0]


def test_missing_mode_names_the_field():
    with pytest.raises(ConfigError, match="'mode'"):
        config.parse_text("seed: 1\n")


def test_sim_without_seed_names_the_field():
    with pytest.raises(ConfigError, match="'seed'"):
        config.validate(config.parse_text("mode: sim\n"))


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r"line 4: unknown key 'sgma'"):
        config.parse_text("mode: sim\nseed: 1\nscenario:\n  sgma: 0.2\n")


def test_mode_conflict_with_subcommand():
    with pytest.raises(ConfigError, match="replay"):
        config.parse_text("mode: replay\n", mode="init")


def test_malformed_yaml():
    with pytest.raises(ConfigError, match="line"):
        config.parse_text("mode: sim\nscenario: [1, 2\n")


def test_bad_filter_name():
    with pytest.raises(ConfigError, match="ukf"):
        config.parse_text("mode: sim\nfilters: [gsf, ukf]\n")


# ---------------------------------------------------------------- logs


@pytest.fixture
def graph():
    return sim.ScenarioConfig().graph()


def test_range_log_round_trip(tmp_path, graph, rng):
    t = np.arange(5) / 50.0 + 1e-7
    y = rng.random((5, 12)) * 4
    logs.write_ranges(tmp_path / "r.csv", graph, t, y)
    snaps = logs.read_ranges(tmp_path / "r.csv", graph)
    assert [s.timestamp for s in snaps] == list(t)
    assert np.array_equal(np.stack([s.values for s in snaps]), y)


def test_velocity_and_truth_round_trip(tmp_path, rng):
    t = np.arange(4) / 50.0
    u = rng.normal(size=(4, 3, 6))
    logs.write_velocities(tmp_path / "v.csv", [1, 2, 3], t, u)
    got = logs.read_velocities(tmp_path / "v.csv", [1, 2, 3])
    assert np.array_equal(np.stack([got[r][1] for r in (1, 2, 3)], axis=1), u)
    T = np.stack([np.stack([lg.exp_map(rng.normal(size=6)) for _ in range(2)]) for _ in t])
    logs.write_truth(tmp_path / "g.csv", [2, 3], t, T)
    tt, TT = logs.read_truth(tmp_path / "g.csv", [2, 3])
    assert np.array_equal(tt, t) and np.array_equal(TT, T)


def test_shuffled_log_rejected_with_line_number(tmp_path, graph, rng):
    logs.write_ranges(tmp_path / "r.csv", graph, np.arange(3) / 50.0, rng.random((3, 12)) + 1)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    lines[14], lines[26] = lines[26], lines[14]
    (tmp_path / "r.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r"r\.csv:1[45]:"):
        logs.read_ranges(tmp_path / "r.csv", graph)


def test_missing_edge_rejected(tmp_path, graph, rng):
    logs.write_ranges(tmp_path / "r.csv", graph, [0.0, 0.02], rng.random((2, 12)) + 1)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    del lines[5]
    (tmp_path / "r.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="lacks edges"):
        logs.read_ranges(tmp_path / "r.csv", graph)


def test_bad_number_rejected(tmp_path, graph):
    (tmp_path / "r.csv").write_text("t,tagA,tagB,range_m\n0.0,1,3,abc\n")
    with pytest.raises(DataError, match=r":2: cannot parse"):
        logs.read_ranges(tmp_path / "r.csv", graph)


def test_zero_order_hold():
    streams = {1: (np.array([0.0, 1.0]), np.array([[1.0] * 6, [2.0] * 6]))}
    u = logs.hold_inputs(streams, [1], np.array([-0.5, 0.0, 0.5, 1.0, 3.0]))
    assert u[:, 0, 0].tolist() == [0.0, 1.0, 1.0, 2.0, 2.0]


# ---------------------------------------------------------------- commands


@pytest.fixture
def sim_cfg(tmp_path):
    p = tmp_path / "sim.yaml"
    p.write_text(SIM_YAML)
    return p


def test_sim_writes_time_series_and_summary(tmp_path, sim_cfg):
    code = cli.main(["sim", "--config", str(sim_cfg), "--out", str(tmp_path / "o")])
    assert code == 0
    for f in ("ekf", "gsf", "pf"):
        rows = read_csv(tmp_path / "o" / f"trial_000_{f}.csv")
        assert len(rows) == 1 + 150
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert set(summary["filters"]) == {"ekf", "gsf", "pf"}
    assert (tmp_path / "o" / "timing.json").exists()


def test_sim_row_count_is_rate_times_duration(tmp_path, sim_cfg):
    p = tmp_path / "ten.yaml"
    p.write_text(SIM_YAML.replace("duration: 3.0", "duration: 10.0"))
    assert cli.main(["sim", "--config", str(p), "--filters", "gsf", "--out", str(tmp_path / "o")]) == 0
    assert len(read_csv(tmp_path / "o" / "trial_000_gsf.csv")) == 1 + 500


def test_sim_is_byte_deterministic(tmp_path, sim_cfg):
    for d in ("a", "b"):
        assert cli.main(["sim", "--config", str(sim_cfg), "--out", str(tmp_path / d)]) == 0
    for f in ("trial_000_ekf.csv", "trial_000_gsf.csv", "trial_000_pf.csv", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_replay_of_exported_logs_is_bit_exact(tmp_path, sim_cfg):
    assert cli.main(["sim", "--config", str(sim_cfg), "--out", str(tmp_path / "s"), "--export-logs"]) == 0
    rcfg = tmp_path / "s" / "logs" / "trial_000" / "replay.yaml"
    assert cli.main(["replay", "--config", str(rcfg), "--out", str(tmp_path / "r")]) == 0
    for f in ("ekf", "gsf", "pf"):
        a = (tmp_path / "s" / f"trial_000_{f}.csv").read_bytes()
        b = (tmp_path / "r" / f"replay_{f}.csv").read_bytes()
        assert a == b


def test_replay_without_truth_drops_error_columns(tmp_path, sim_cfg):
    assert cli.main(["sim", "--config", str(sim_cfg), "--out", str(tmp_path / "s"), "--export-logs",
                     "--filters", "gsf"]) == 0
    d = tmp_path / "s" / "logs" / "trial_000"
    text = (d / "replay.yaml").read_text().replace("truth: truth.csv", "truth: null")
    (d / "notruth.yaml").write_text(text)
    assert cli.main(["replay", "--config", str(d / "notruth.yaml"), "--out", str(tmp_path / "r")]) == 0
    head = read_csv(tmp_path / "r" / "replay_gsf.csv")[0]
    assert not any(h.startswith(("att_", "pos_", "nees")) for h in head)
    assert any(h.startswith("w_") for h in head)
    assert (tmp_path / "r" / "timing.json").exists()


def _static_log(tmp_path, poses, n):
    cfg = sim.ScenarioConfig(n_robots=n)
    graph = cfg.graph()
    x = M.RelativeState(poses)
    y = M.range_stack(x, cfg.geometries, graph)
    logs.write_ranges(tmp_path / "static.csv", graph, np.arange(-199, 1) / 50.0, np.tile(y, (200, 1)))
    cfgp = tmp_path / "init.yaml"
    cfgp.write_text(f"mode: init\nscenario: {{n_robots: {n}}}\nlogs: {{ranges: static.csv}}\n")
    return cfgp


def _lift(T2):
    T = np.eye(4)
    T[:2, :2] = T2[:2, :2]
    T[:2, 3] = T2[:2, 2]
    return T


def test_init_reports_eight_modes(tmp_path, eight_mode_scene, capsys):
    _, _, truth = eight_mode_scene
    cfgp = _static_log(tmp_path, np.stack([_lift(T) for T in truth.poses]), 3)
    assert cli.main(["init", "--config", str(cfgp), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "mixture.json").read_text())
    assert rep["n_geometric"] == 16 and rep["n_modes"] == 8
    assert capsys.readouterr().out.startswith("8 modes")
    first = (tmp_path / "o" / "mixture.json").read_bytes()
    assert cli.main(["init", "--config", str(cfgp), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "mixture.json").read_bytes() == first


def test_init_two_robots_at_most_four(tmp_path):
    T = _lift(lg.exp_map([0.7, 2.0, -1.0]))
    cfgp = _static_log(tmp_path, T[None], 2)
    assert cli.main(["init", "--config", str(cfgp), "--out", str(tmp_path / "o")]) == 0
    assert 1 <= json.loads((tmp_path / "o" / "mixture.json").read_text())["n_modes"] <= 4


def test_exit_code_config_error(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("mode: sim\nseed: 1\nbogus: 2\n")
    assert cli.main(["sim", "--config", str(p)]) == cli.EXIT_CONFIG


def test_exit_code_data_error(tmp_path, graph):
    (tmp_path / "r.csv").write_text("t,tagA,tagB,range_m\n0.0,1,3,oops\n")
    assert cli.main(["init", "--ranges", str(tmp_path / "r.csv"), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_exit_code_numerical_failure(tmp_path, graph):
    y = np.full(12, 50.0)
    y[0] = 0.5  # one pair of tags 0.5 m apart, the other 50 m: no circle intersection
    logs.write_ranges(tmp_path / "r.csv", graph, [0.0], y[None])
    code = cli.main(["init", "--ranges", str(tmp_path / "r.csv"), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_NUMERIC


def test_missing_config_file(tmp_path):
    assert cli.main(["sim", "--config", str(tmp_path / "nope.yaml")]) == cli.EXIT_CONFIG
