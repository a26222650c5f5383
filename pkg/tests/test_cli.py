import json
import subprocess
import sys

import pytest

from popcast import scenarios as sc
from popcast.cli import main

TINY = "[train]\nepochs_adam = 2\nn_interior = 32\nn_ic = 8\nn_bc = 4\nn_data = 8\nwidths = 2, 8, 1\n"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def test_scenarios_list(capsys):
    code, out, _ = run(capsys, "scenarios", "list")
    names = [json.loads(line)["name"] for line in out.splitlines()]
    assert code == 0 and names == [c.name for c in sc.builtin_scenarios()]


def test_solve_writes_outputs(capsys, tmp_path):
    code, out, _ = run(capsys, "solve", "--scenario", "boost", "--out", str(tmp_path))
    assert code == 0
    payload = json.loads(out)
    assert (tmp_path / "boost_solver_grid.csv").exists()
    assert set(payload["artifacts"]) >= {"heatmap", "pyramid_2054", "dependency", "report"}


def test_train_and_forecast_from_checkpoint(capsys, tmp_path, tiny_config):
    code, out, _ = run(capsys, "train", "--config", str(tiny_config), "--mode", "hybrid",
                       "--seed", "3", "--out", str(tmp_path))
    assert code == 0
    ck = json.loads(out)["artifacts"]["checkpoint"]
    code, out, _ = run(capsys, "forecast", "--config", str(tiny_config), "--checkpoint", ck,
                       "--out", str(tmp_path / "fc"))
    assert code == 0 and (tmp_path / "fc" / "baseline_forecast_grid.csv").exists()


def test_explain_and_pyramid(capsys, tmp_path):
    code, out, _ = run(capsys, "explain", "--age", "30", "--year", "2039", "--out", str(tmp_path))
    assert code == 0 and "age_weight" in json.loads(out)
    code, _, _ = run(capsys, "pyramid", "--year", "2024", "--out", str(tmp_path))
    assert code == 0 and (tmp_path / "baseline_pyramid_2024.csv").exists()


def test_compare(capsys, tmp_path):
    code, out, _ = run(capsys, "compare", "baseline", "declining", "boost", "--out", str(tmp_path))
    payload = json.loads(out)
    assert code == 0 and payload["checks"]["young_pop_final: declining < baseline < boost"]


def test_train_rejects_solver_mode(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--mode", "solver", "--out", str(tmp_path))
    assert code == 2 and json.loads(err)["error"] == "UsageError"


def test_bad_config_error_line(capsys, tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[scenario]\nflavour = mild\n")
    code, out, err = run(capsys, "solve", "--config", str(p), "--out", str(tmp_path))
    assert code == 1 and out == ""
    rec = json.loads(err)
    assert rec["error"] == "ConfigError" and "flavour" in rec["message"]


def test_unknown_scenario(capsys, tmp_path):
    code, _, err = run(capsys, "solve", "--scenario", "utopia", "--out", str(tmp_path))
    assert code == 1 and json.loads(err)["error"] == "KeyError"


def test_bad_command_line(capsys):
    code, _, err = run(capsys, "solve", "--mode", "crystal-ball")
    assert code == 2 and json.loads(err.splitlines()[-1])["error"] == "UsageError"


def test_env_override(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("POPCAST_GRID_T_MAX", "2030")
    code, _, _ = run(capsys, "solve", "--out", str(tmp_path))
    lines = (tmp_path / "baseline_solver_dependency.csv").read_text().splitlines()
    assert code == 0 and len(lines) == 1 + 7


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "popcast", "scenarios", "list"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "two-child" in proc.stdout


def test_cli_outputs_byte_identical(capsys, tmp_path, tiny_config):
    for d in ("a", "b"):
        assert run(capsys, "train", "--config", str(tiny_config), "--seed", "11",
                   "--out", str(tmp_path / d))[0] == 0
    a = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert a == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in a:
        if name.endswith(".csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
