import json
import subprocess
import sys
from pathlib import Path

import pytest

from kamtori.cli import EXIT_CONDITION, EXIT_CONFIG, EXIT_OK, load_config, main

ROOT = Path(__file__).resolve().parents[1]
WORKED = (ROOT / "configs" / "worked_example.toml").read_text()


def write_config(tmp_path, text=WORKED, name="c.toml", **scheme):
    for key, val in scheme.items():
        lines = text.splitlines()
        hit = [i for i, ln in enumerate(lines) if ln.split("=")[0].strip() == key]
        if hit:
            lines[hit[0]] = f"{key} = {val}"
        else:
            lines.insert(lines.index("[scheme]") + 1, f"{key} = {val}")
        text = "\n".join(lines) + "\n"
    p = tmp_path / name
    p.write_text(text)
    return p


def zero_config(tmp_path):
    text = WORKED.replace("cos = 1e-4", "cos = 0.0")
    return write_config(tmp_path, text, "zero.toml")


@pytest.fixture(scope="module")
def worked_cli(tmp_path_factory):
    out = tmp_path_factory.mktemp("worked")
    cfg = write_config(out)
    code = main(["run", "--config", str(cfg), "--out", str(out)])
    return code, out


# run --------------------------------------------------------------------------

def test_zero_perturbation_run(tmp_path, capsys):
    code = main(["run", "--config", str(zero_config(tmp_path)), "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    rep = json.loads((tmp_path / "o" / "run_report.json").read_text())
    assert rep["status"] == "converged" and rep["steps"] == []
    assert (tmp_path / "o" / "torus_0.csv").exists()


def test_alpha_above_bound_exits_two(tmp_path, capsys):
    cfg = write_config(tmp_path, alpha=4.5)
    code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONDITION
    assert "(SmaLConD)" in capsys.readouterr().err
    rep = json.loads((tmp_path / "o" / "run_report.json").read_text())
    assert rep["status"] == "condition_failed"


def test_worked_example_run(worked_cli):
    code, out = worked_cli
    assert code == EXIT_OK
    rep = json.loads((out / "run_report.json").read_text())
    assert rep["status"] == "converged"
    assert len(rep["steps"]) >= 5
    lines = (out / "convergence.csv").read_text().splitlines()
    assert lines[0] == "j,P_norm,ratio,sigma_j,s_j,r_j,kappa_j,min_slack"
    assert len(lines) == len(rep["steps"]) + 2
    assert (out / "torus_0.csv").read_text().splitlines()[0] == \
        "x1,x2,v1,v2,u1,u2,graph_v1,graph_v2"


def test_run_csv_is_deterministic(worked_cli, worked_run, tmp_path):
    worked_run.write_convergence_csv(tmp_path / "lib.csv")
    assert (tmp_path / "lib.csv").read_bytes() == (worked_cli[1] / "convergence.csv").read_bytes()


def test_report_header_carries_run_metadata(worked_cli):
    rep = json.loads((worked_cli[1] / "run_report.json").read_text())
    assert {"version", "seed", "force", "timestamp", "elapsed_seconds"} <= set(rep["header"])


def test_validate_stored_torus(worked_cli, tmp_path):
    out = worked_cli[1]
    text = WORKED.replace("T = 100.0", "T = 2.0").replace("samples = 32", "samples = 4")
    cfg = write_config(tmp_path, text)
    assert main(["validate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "validate_report.json").read_text())
    assert rep["invariance_defect"] <= 1e-7 and rep["isotropy_defect"] <= 1e-7
    assert (out / "defects.csv").read_text().splitlines()[0] == "sample,t,defect"


def test_validate_without_torus(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code = main(["validate", "--config", str(cfg), "--out", str(tmp_path / "empty")])
    assert code == EXIT_CONFIG
    assert "validate.torus" in capsys.readouterr().err


# config errors ----------------------------------------------------------------

def test_unknown_scheme_field(tmp_path, capsys):
    cfg = write_config(tmp_path, bogus=1)
    assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG
    assert "scheme.bogus" in capsys.readouterr().err


def test_missing_hamiltonian(tmp_path, capsys):
    cfg = write_config(tmp_path, "[scheme]\nalpha = 1.0\n")
    assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG
    assert "hamiltonian" in capsys.readouterr().err


def test_two_hamiltonian_sources(tmp_path, capsys):
    text = WORKED.replace('family = "quadratic_trig"', 'family = "quadratic_trig"\ntable = "t.csv"')
    assert main(["run", "--config", str(write_config(tmp_path, text))]) == EXIT_CONFIG
    assert "exactly one" in capsys.readouterr().err


def test_missing_file(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.toml")]) == EXIT_CONFIG


def test_invalid_scheme_value(tmp_path, capsys):
    cfg = write_config(tmp_path, tau=0.5)
    assert main(["step", "--config", str(cfg)]) == EXIT_CONFIG
    assert "scheme" in capsys.readouterr().err


def test_table_source_resolved_relative_to_config(tmp_path):
    (tmp_path / "t.csv").write_text("k1,k2,cos,sin\n1,0,1e-4,0\n1,1,1e-4,0\n")
    text = WORKED.replace('family = "quadratic_trig"', 'table = "t.csv"')
    rc = load_config(write_config(tmp_path, text))
    assert rc.hamiltonian["table"] == str((tmp_path / "t.csv").resolve())


# other commands ---------------------------------------------------------------

def test_step_on_zero_perturbation(tmp_path):
    out = tmp_path / "o"
    assert main(["step", "--config", str(zero_config(tmp_path)), "--out", str(out)]) == EXIT_OK
    rec = json.loads((out / "step_report.json").read_text())
    assert rec["identity"] is True and rec["norms"]["P_prime"] == 0.0


def test_measure_single_alpha(tmp_path):
    text = WORKED.replace("alphas = [0.001, 0.002, 0.004, 0.008, 0.016]", "alphas = [0.001]") \
        .replace("samples = 100000", "samples = 10000")
    out = tmp_path / "o"
    assert main(["measure", "--config", str(write_config(tmp_path, text)), "--out", str(out)]) == 0
    assert len((out / "measure.csv").read_text().splitlines()) == 2
    assert "slope" not in json.loads((out / "measure.json").read_text())


def test_measure_is_deterministic(tmp_path):
    text = WORKED.replace("samples = 100000", "samples = 10000")
    cfg = write_config(tmp_path, text)
    for o in ("a", "b"):
        assert main(["measure", "--config", str(cfg), "--out", str(tmp_path / o)]) == 0
    assert (tmp_path / "a" / "measure.csv").read_bytes() == (tmp_path / "b" / "measure.csv").read_bytes()


def test_smooth_bench_slope(tmp_path):
    text = WORKED.replace('functions = ["abs_sin_7_2", "analytic_inv_cos"]',
                          'functions = ["abs_sin_7_2"]')
    out = tmp_path / "o"
    assert main(["smooth-bench", "--config", str(write_config(tmp_path, text)),
                 "--out", str(out)]) == EXIT_OK
    rows = (out / "smooth_rates.csv").read_text().splitlines()
    slope = float(rows[1].split(",")[3])
    assert abs(slope - 3.5) <= 0.15 * 3.5


def test_smooth_bench_unknown_function(tmp_path, capsys):
    text = WORKED.replace('functions = ["abs_sin_7_2", "analytic_inv_cos"]', 'functions = ["x"]')
    assert main(["smooth-bench", "--config", str(write_config(tmp_path, text)),
                 "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "smooth_bench.functions" in capsys.readouterr().err


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "kamtori", "--version"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and r.stdout.strip()
