import numpy as np
import pytest

import mcsolve
from run_config import load_run
from solver_core import SolutionField
from utils import read_report, read_solution_csv, write_field_csv

TINY = """
seed = 11

[domain]
shape = "ball"
center = [0.0, 0.0]
radius = 1.0

[[measure]]
kind = "density"
expr = "1"

[paths]
step = 0.004

[solver]
grid_resolution = {grid}
paths_per_node = 60
max_sweeps = {sweeps}

[verification]
n_paths = 200
n_test_functions = 2
{checks}
"""


def write_config(tmp_path, grid=5, sweeps=6, checks="", extra=""):
    path = tmp_path / "run.toml"
    path.write_text(TINY.format(grid=grid, sweeps=sweeps, checks=checks) + extra, encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def isolated_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def test_solve_writes_artifacts(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "solved"
    assert mcsolve.main(["solve", str(config), "--out", str(out)]) == mcsolve.EXIT_OK

    nodes, values, errors = read_solution_csv(out / "solution.csv")
    assert nodes.shape[1] == 2
    assert values.shape == errors.shape == (len(nodes), 1)
    report = read_report(out / "report.txt")
    assert report["converged"] == "true"
    assert report["verification"] == "no checks enabled"
    assert read_report(out / "paths_meta.txt")["seed"] == "11"
    assert "no checks enabled" in capsys.readouterr().out


def test_seed_flag_overrides_file(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "reseeded"
    assert mcsolve.main(["solve", str(config), "--out", str(out), "--seed", "12"]) == 0
    assert read_report(out / "paths_meta.txt")["seed"] == "12"


def test_check_only_does_not_solve(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "unused"
    assert mcsolve.main(["solve", str(config), "--check-only", "--out", str(out)]) == 0
    assert not (out / "solution.csv").exists()
    assert "conditions: none declared" in capsys.readouterr().out


def test_violated_condition_under_strict(tmp_path):
    config = write_config(
        tmp_path, extra='\n[nonlinearity]\nkind = "expression"\nexprs = ["y1"]\ndeclared = ["A4"]\n\n[checks]\nn_samples = 1000\n'
    )
    assert mcsolve.main(["check", str(config)]) == mcsolve.EXIT_OK
    assert mcsolve.main(["check", str(config), "--strict"]) == mcsolve.EXIT_VERIFICATION


def test_invalid_inputs(tmp_path):
    assert mcsolve.main(["check", str(tmp_path / "missing.toml")]) == mcsolve.EXIT_INVALID
    config = tmp_path / "bad.toml"
    config.write_text(
        '[domain]\nshape = "ball"\ncenter = [0.0, 0.0]\nradius = 1.0\n\n[[measure]]\nkind = "densty"\nexpr = "1"\n',
        encoding="utf-8",
    )
    assert mcsolve.main(["check", str(config)]) == mcsolve.EXIT_INVALID


def test_non_convergence_is_a_numerical_failure(tmp_path):
    config = write_config(tmp_path, sweeps=1)
    out = tmp_path / "stalled"
    assert mcsolve.main(["solve", str(config), "--out", str(out)]) == mcsolve.EXIT_NUMERICAL
    assert read_report(out / "report.txt")["converged"] == "false"
    assert not (out / "solution.csv").exists()


def test_verify_stored_solution(tmp_path):
    config = write_config(tmp_path, grid=33, checks="duality = true\nstampacchia = true")
    run = load_run(config)
    exact = SolutionField.from_function(run.domain, 33, lambda p: 0.5 * (1.0 - np.sum(p**2, axis=1)))
    out = tmp_path / "verified"
    out.mkdir()
    write_field_csv(out / "solution.csv", exact.interior_nodes, exact.interior_values, exact.interior_standard_errors)

    assert mcsolve.main(["verify", str(config), "--out", str(out), "--strict"]) == mcsolve.EXIT_OK
    report = read_report(out / "verification.txt")
    assert report["duality"] == "pass"
    assert report["stampacchia"] == "skipped"

    doubled = exact.scaled(2.0)
    wrong = tmp_path / "wrong.csv"
    write_field_csv(wrong, doubled.interior_nodes, doubled.interior_values, doubled.interior_standard_errors)
    args = ["verify", str(config), "--out", str(out), "--solution", str(wrong)]
    assert mcsolve.main(args) == mcsolve.EXIT_OK
    assert mcsolve.main(args + ["--strict"]) == mcsolve.EXIT_VERIFICATION
    assert read_report(out / "verification.txt")["duality"] == "fail"


def test_oracle_on_disk(tmp_path):
    config = write_config(tmp_path, grid=9)
    out = tmp_path / "oracle"
    assert mcsolve.main(["oracle", str(config), "--out", str(out)]) == 0
    nodes, values, _ = read_solution_csv(out / "oracle.csv")
    assert np.allclose(values[:, 0], 0.5 * (1.0 - np.sum(nodes**2, axis=1)), atol=1e-6)
    report = read_report(out / "oracle_report.txt")
    assert report["method"] == "radial"
    assert float(report["mean_exit_time"]) == pytest.approx(0.5, abs=0.1)
    assert float(report["exit_time_bound"]) >= 0.5
