import json

import numpy as np
import pytest

from pfoc.cli import main
from pfoc.config import parse_config, preset, to_text

SMALL = ["grid.coarsest_n=8", "grid.storage_n=32", "grid.solve_n=32", "problem.max_iter=2"]


def test_dump_config(capsys):
    assert main(["--preset", "reference", "--dump-config"]) == 0
    assert parse_config(capsys.readouterr().out) == preset("reference")


def test_dump_config_from_file(tmp_path, capsys):
    path = tmp_path / "a.cfg"
    path.write_text(to_text(preset("ladder")))
    assert main([str(path), "--set", "problem.theta=0.5", "--dump-config"]) == 0
    assert parse_config(capsys.readouterr().out).problem.theta == 0.5


@pytest.mark.parametrize("argv, match", [
    ([], "no configuration"),
    (["--preset", "table1", "--set", "problem.eps=-1"], "must be positive"),
    (["--preset", "table1", "--set", "problem.bogus=1"], "unknown key"),
    (["--preset", "table1", "--threads", "0"], "threads"),
])
def test_configuration_errors_exit_2(argv, match, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err
    assert "configuration error" in err and match in err


def test_configuration_error_reports_file_line(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("[problem]\neps = 0.1\ntheta = zero\n")
    assert main([str(path)]) == 2
    err = capsys.readouterr().err
    assert str(path) in err and "line 3" in err


def test_optimize_run_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert main(["--preset", "table1", "--output-dir", str(out), "--log-level", "WARNING",
                 *sum((["--set", s] for s in SMALL), [])]) == 0
    for name in ("config.ini", "J_history.csv", "diagnostics.json", "phi_final.txt", "eta_final.txt"):
        assert (out / name).is_file(), name
    assert not (out / "failure.json").exists()
    J = np.loadtxt(out / "J_history.csv", delimiter=",", skiprows=1, usecols=1, ndmin=1)
    assert 1 <= len(J) <= 2 and np.all(np.isfinite(J))


def test_runtime_failure_exit_1(tmp_path, capsys):
    out = tmp_path / "fail"
    argv = ["--preset", "table1", "--output-dir", str(out), "--log-level", "ERROR",
            "--set", "problem.max_cycles=1", "--set", "problem.residual_tol=1e-15",
            *sum((["--set", s] for s in SMALL), [])]
    assert main(argv) == 1
    report = json.loads((out / "failure.json").read_text())
    assert report["error"] == "ConvergenceError"
    assert report["residual_history"] and all(np.isfinite(report["residual_history"]))
    assert "failure.json" in capsys.readouterr().err
