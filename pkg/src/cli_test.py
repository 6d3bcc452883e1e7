import json

import pytest

import cli
from config import KALGRAD_VERSION
from errors import ConvergenceError

TINY_YAML = """\
model:
  preset: mass_spring
learner:
  step_size: 0.2
  batch_size: 5
  horizon: 10
  max_iters: 5
  seed: 3
sweep:
  batch_sizes: [2, 4]
  horizons: [10]
  seed_count: 2
diagnostics:
  checks: [epsilon, power_bound]
  k_max: 20
  duality_samples: 200
  duality_horizon: 5
output:
  directory: {out}
  formats: [csv, json]
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yml"
    path.write_text(TINY_YAML.format(out=tmp_path / "runs"))
    return path


def test_no_command_is_usage_error():
    assert cli.main([]) == cli.EXIT_USAGE


def test_missing_config_flag_is_usage_error():
    with pytest.raises(SystemExit) as info:
        cli.main(["learn"])
    assert info.value.code == cli.EXIT_USAGE


def test_bad_config_exits_2(tmp_path):
    path = tmp_path / "bad.yml"
    path.write_text("model:\n  preset: mass_spring\nlearner:\n  bogus: 1\n")
    assert cli.main(["oracle", "--config", str(path), "--quiet"]) == cli.EXIT_CONFIG
    assert cli.main(["oracle", "--config", str(tmp_path / "absent.yml"), "--quiet"]) == 2


def test_oracle_prints_json(capsys):
    assert cli.main(["oracle", "--config", "mass_spring", "--quiet"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload) == {"L_star", "P_inf", "rho", "J_star"}
    assert 0.0 < payload["rho"] < 1.0
    assert len(payload["L_star"]) == 2


def test_learn_is_byte_identical(tiny_config, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli.main(["learn", "--config", str(tiny_config), "--out", str(out),
                         "--deterministic", "--quiet"])
        assert code == 0
        outs.append((out / "learn_sgd_seed3.csv").read_bytes())
    assert outs[0] == outs[1]
    header = outs[0].decode().splitlines()[0]
    assert header == "iter,J,J_gap,J_gap_normalized,grad_norm,rho,eta_effective,safeguard_flag,wall_ms"
    assert len(outs[0].decode().splitlines()) == 7


def test_learn_gd_without_enough_iterations_exits_3(tiny_config, tmp_path):
    # five exact-gradient steps cannot reach tol = 1e-10 on the mass-spring model
    code = cli.main(["learn", "--config", str(tiny_config), "--out", str(tmp_path / "gd"),
                     "--method", "gd", "--quiet"])
    assert code == cli.EXIT_NUMERICAL


def test_run_writes_cells_and_metadata(tiny_config, tmp_path):
    out = tmp_path / "sweep"
    assert cli.main(["run", "--config", str(tiny_config), "--out", str(out), "--workers", "1",
                     "--quiet"]) == 0
    meta = json.loads((out / "metadata.json").read_text())
    assert [c["batch_size"] for c in meta["cells"]] == [2, 4]
    assert meta["seeds"] == [3, 4]
    for M in (2, 4):
        cell = out / f"cell_M{M}_T10"
        assert (cell / "aggregate.csv").exists()
        assert len(list(cell.glob("run_seed*.csv"))) == 2


def test_diagnose_selected_checks(tiny_config, tmp_path):
    out = tmp_path / "diag"
    assert cli.main(["diagnose", "--config", str(tiny_config), "--out", str(out),
                     "--quiet"]) == 0
    report = json.loads((out / "diagnostics.json").read_text())
    assert report["epsilon"]["status"] == "pass"
    assert report["power_bound"]["status"] == "pass"
    assert report["power_bound"]["L_star"]["worst_ratio"] <= 1.0 + 1e-9


def test_duality_check_command(tiny_config, capsys):
    assert cli.main(["duality-check", "--config", str(tiny_config), "--samples", "300",
                     "--horizon", "4", "--quiet"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["mc_samples"] == 300
    assert payload["horizon"] == 4


def test_simulate_exports_trajectory(tiny_config, tmp_path):
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--config", str(tiny_config), "--out", str(out),
                     "--horizon", "6", "--quiet"]) == 0
    lines = (out / "trajectory_seed3.csv").read_text().splitlines()
    assert lines[0] == "t,y_1"
    assert len(lines) == 8


def test_diagnose_keeps_going_after_a_failed_check(tiny_config, tmp_path, monkeypatch):
    def no_convergence(*args, **kwargs):
        raise ConvergenceError("gradient descent did not reach tol")

    monkeypatch.setattr(cli, "gd_run", no_convergence)
    out = tmp_path / "diag"
    code = cli.main(["diagnose", "--config", str(tiny_config), "--out", str(out),
                     "--checks", "epsilon,landscape,power_bound", "--quiet"])
    assert code == cli.EXIT_NUMERICAL
    report = json.loads((out / "diagnostics.json").read_text())
    assert report["landscape"]["status"] == "fail"
    assert "ConvergenceError" in report["landscape"]["message"]
    assert report["epsilon"]["status"] == "pass"
    assert report["power_bound"]["status"] == "pass"
    assert report["version"] == KALGRAD_VERSION


def test_version_flag_reports_config_version(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--version"])
    assert info.value.code == 0
    assert capsys.readouterr().out.strip() == f"kalgrad {KALGRAD_VERSION}"
