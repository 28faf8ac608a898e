import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from pgaopt import cli, harness
from pgaopt.errors import ConfigError
from pgaopt.solvers import TRACE_COLUMNS, read_trace_csv


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


# -- config ----------------------------------------------------------------------

def test_domain_defaults():
    cfg = harness.config_from_dict({})
    assert (cfg.domain, cfg.penalty_C, cfg.budget) == ("ndim", 0.05, 60.0)
    assert (cfg.stop_rule().window_n, cfg.stop_rule().delta) == (50, 1e-6)
    d = harness.config_from_dict({"domain": "dhs_simplified"})
    assert (d.penalty_C, d.budget, d.stop_rule().window_n, d.stop_rule().delta) == (100.0, 300.0, 1000, 0.1)
    assert d.ipdd_state(12).rho == 100.0 and d.ipdd_state(12).rho_max == 1e8


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"stop": {"window": 3}},
    {"domain": "mars"},
    {"solvers": ["pga", "sqp"]},
    {"C": -1.0},
    {"stop": {"mode": "sometimes"}},
    {"demand": {"source": "file", "file": "/nonexistent"}},
    {"init": {"mode": "guess"}},
    {"stop": "fast"},
])
def test_bad_configs_are_rejected(data):
    with pytest.raises(ConfigError):
        harness.config_from_dict(data)


def test_load_config_overrides(tmp_path):
    p = write_yaml(tmp_path / "c.yaml", {"domain": "ndim", "seed": 3, "time_limit_s": 5})
    cfg = harness.load_config(p, seed=None, time_limit_s=2.0, domain=None)
    assert cfg.seed == 3 and cfg.budget == 2.0
    with pytest.raises(ConfigError):
        harness.load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        harness.load_config(tmp_path / "bad.yaml")


def test_surrogate_domain_needs_models():
    with pytest.raises(ConfigError):
        harness.build_problem(harness.config_from_dict({"domain": "dhs_surrogate"}))


def test_initial_points_modes(tmp_path):
    cfg = harness.config_from_dict({"domain": "ndim"})
    prob = harness.build_problem(cfg)
    pts = harness.initial_points(cfg, prob, 3)
    np.testing.assert_array_equal(pts[1], [4, 3, 2])
    np.savetxt(tmp_path / "i.csv", [[5, 5, 5], [6, 6, 6]], delimiter=",")
    cfg = harness.config_from_dict({"domain": "ndim", "init": {"mode": "file", "file": str(tmp_path / "i.csv")}})
    np.testing.assert_array_equal(harness.initial_points(cfg, prob, 2)[1], [6, 6, 6])
    cfg = harness.config_from_dict({"domain": "ndim", "init": {"mode": "explicit", "points": [[1, 2]]}})
    with pytest.raises(ConfigError):
        harness.initial_points(cfg, prob, 1)


# -- run / summaries ------------------------------------------------------------------

@pytest.fixture(scope="module")
def ndim_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = harness.config_from_dict({"domain": "ndim", "time_limit_s": 20.0, "max_outer": 4, "out": str(out)})
    return cfg, harness.run(cfg)


def test_run_writes_traces_and_summary(ndim_run):
    cfg, summary = ndim_run
    out = summary.out_dir
    for name in ("pm.csv", "pga.csv", "ipdd.csv", "summary.csv"):
        assert (out / name).is_file()
    assert (out / "pga.csv").read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
    rows = harness.read_summary(out / "summary.csv")
    assert [r["solver"] for r in rows] == ["pm", "pga", "ipdd", "oracle"]
    assert rows[0]["outer_iterations"] == "1" and rows[1]["outer_iterations"] == "4"
    assert float(rows[3]["best_feasible_objective"]) == pytest.approx(summary.oracle_J)
    side = json.loads((out / "pga_config.json").read_text())
    assert side["config"]["domain"] == "ndim" and side["completed_outer_iterations"] == 4


def test_summary_is_recomputable_from_traces(ndim_run):
    _, summary = ndim_run
    for solver in ("pm", "pga", "ipdd"):
        again = harness.summarize_trace_file(summary.out_dir / f"{solver}.csv")
        assert again == summary.row(solver)


def test_trace_rows_are_consistent(ndim_run):
    cfg, summary = ndim_run
    prob = harness.build_problem(cfg)
    rows = read_trace_csv(summary.out_dir / "pga.csv")
    assert all(a["wall_time_s"] <= b["wall_time_s"] for a, b in zip(rows, rows[1:]))
    assert all(a["inner_iters_cum"] <= b["inner_iters_cum"] for a, b in zip(rows, rows[1:]))
    with open(summary.out_dir / "pga_iterates.csv") as fh:
        its = list(csv.DictReader(fh))
    for r, it in zip(rows, its):
        u = np.array([float(it[f"u{i}"]) for i in range(3)])
        assert r["objective"] == pytest.approx(prob.objective(u), rel=1e-12)
        assert r["feasible"] == prob.is_feasible(u)


def test_outer_loop_is_deterministic_given_max_outer(tmp_path):
    cfg = harness.config_from_dict({"domain": "ndim", "time_limit_s": 60.0})
    prob = harness.build_problem(cfg)
    u0 = np.array([4.0, 2.0, 2.0])
    a = harness._solve(cfg, prob, "pga", u0, 60.0, max_outer=3)[1]
    b = harness._solve(cfg, prob, "pga", u0, 60.0, max_outer=3)[1]
    np.testing.assert_array_equal(a, b)


def test_summarize_rows_excludes_start():
    rows = [{"wall_time_s": 0.0, "outer_iter": 0, "objective": 1.0, "feasible": True, "max_infeasibility": 0.0},
            {"wall_time_s": 0.5, "outer_iter": 1, "objective": 3.0, "feasible": False, "max_infeasibility": 1.0},
            {"wall_time_s": 1.5, "outer_iter": 2, "objective": 2.0, "feasible": True, "max_infeasibility": 0.0}]
    s = harness.summarize_rows("pga", rows, 2)
    assert s["best_feasible_objective"] == 2.0 and s["time_to_first_feasible_s"] == 1.5
    assert s["outer_time_mean_s"] == pytest.approx(0.75) and s["outer_iterations"] == 2


# -- studies ---------------------------------------------------------------------------

def test_tractability_degenerate_cases():
    cfg = harness.config_from_dict({"domain": "ndim", "max_outer": 2})
    one = harness.tractability_study(cfg, 1)
    assert one.distance == 0.0 and one.raw_max_distance == 0.0
    same = harness.config_from_dict({"domain": "ndim", "max_outer": 2,
                                     "init": {"mode": "explicit", "points": [[4, 2, 2]] * 3}})
    res = harness.tractability_study(same, 3)
    assert res.distance == 0.0 and res.passed
    with pytest.raises(ConfigError):
        harness.tractability_study(cfg, 0)


def test_sweep_validation_and_output(tmp_path):
    cfg = harness.config_from_dict({"domain": "ndim"})
    with pytest.raises(ConfigError):
        harness.sweep_C(cfg, [0.05])
    with pytest.raises(ConfigError):
        harness.sweep_C(cfg, [0.05, -1.0])
    rows = harness.sweep_C(cfg, [0.05, 5.0], tmp_path / "s.csv")
    assert rows[0]["objective"] < rows[1]["objective"]
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == ",".join(harness.SWEEP_COLUMNS)


def test_validate_gradients_small():
    rep = harness.validate_gradients(harness.config_from_dict({"domain": "dhs_simplified"}), 5)
    assert rep.passed and rep.n_points == 5


def test_gen_data_and_train_surrogate(tmp_path):
    cfg = harness.config_from_dict({"domain": "dhs_surrogate", "out": str(tmp_path),
                                    "surrogate": {"n_episodes": 20, "g_max_epochs": 3, "f_max_epochs": 3}})
    path = harness.gen_data(cfg)
    assert path == tmp_path / "dataset.csv"
    cfg2 = harness.config_from_dict({"domain": "dhs_surrogate", "out": str(tmp_path),
                                     "surrogate": {"dataset": str(path), "g_max_epochs": 3, "f_max_epochs": 3}})
    rep = harness.train_surrogate(cfg2)
    assert rep["rows"] == 20 * 12 and rep["g_epochs"] == 3
    assert (tmp_path / "surrogate" / "g_net.json").is_file()
    cfg3 = harness.config_from_dict({"domain": "dhs_surrogate", "surrogate": {"model_dir": str(tmp_path / "surrogate")},
                                     "max_outer": 1, "time_limit_s": 30})
    prob = harness.build_problem(cfg3)
    assert prob.horizon == 12 and prob.rhs.max() == pytest.approx(29.0)


# -- CLI -------------------------------------------------------------------------------

def test_cli_help_and_bad_flags(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--help"])
    assert e.value.code == 0
    with pytest.raises(SystemExit) as e:
        cli.main(["run", "--bogus"])
    assert e.value.code == 1


def test_cli_config_errors(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "missing.yaml")]) == 1
    bad = write_yaml(tmp_path / "bad.yaml", {"domain": "ndim", "penalty": 3})
    assert cli.main(["run", "--config", str(bad)]) == 1
    assert cli.main(["sweep-c", "--out", str(tmp_path), "--C", "0.05"]) == 1
    assert cli.main(["run", "--solver", "pga,sqp", "--out", str(tmp_path)]) == 1


def test_cli_numerical_failure_exit_code(tmp_path):
    assert cli.main(["sweep-c", "--out", str(tmp_path), "--C", "1e300", "1e308"]) == 2


def test_cli_run_and_validate(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", {"domain": "ndim", "max_outer": 2, "solvers": ["pga", "ipdd"]})
    assert cli.main(["run", "--config", str(cfg), "--time-limit", "10", "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "summary.csv").is_file() and not (tmp_path / "r" / "pm.csv").exists()
    assert cli.main(["validate-gradients", "--domain", "ndim", "--points", "5"]) == 0
    assert "pass" in capsys.readouterr().out


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "pgaopt.cli", "validate-gradients", "--domain", "ndim",
                          "--points", "3"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
