import json
import subprocess
import sys
from pathlib import Path

import pytest

from mkvlab.cli import EXIT_CONFIG, EXIT_OK, EXIT_THRESHOLD, EXIT_VALIDATION, SCHEMAS, run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _load(name):
    return json.loads((CONFIGS / name).read_text())


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_pass_schema(path):
    from mkvlab.problems.config import check_schema
    cfg = json.loads(path.read_text())
    sub = cfg["schema"].split("/")[1]
    check_schema(cfg, SCHEMAS[sub])


def test_zero_steps_is_a_config_error(tmp_path, capsys):
    cfg = _load("simulate_lqcn1.json")
    cfg["grid"]["steps"] = 0
    out = tmp_path / "out"
    assert run("simulate", _write(tmp_path, cfg), out_dir=out) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "grid.steps" in err
    man = _manifest(out)
    assert man["exit_code"] == EXIT_CONFIG and "grid.steps" in man["message"]
    assert man["outputs"] == []


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    cfg = _load("simulate_lqcn1.json")
    cfg["particles"]["P"] = 3
    assert run("simulate", _write(tmp_path, cfg), out_dir=tmp_path / "o") == EXIT_CONFIG
    assert "particles" in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("validate", bad, out_dir=tmp_path / "o") == EXIT_CONFIG
    assert run("validate", tmp_path / "missing.json", out_dir=tmp_path / "o2") == EXIT_CONFIG


def test_wrong_schema_tag(tmp_path):
    cfg = _load("validate_lqcn1.json")
    assert run("simulate", _write(tmp_path, cfg), out_dir=tmp_path / "o") == EXIT_CONFIG


def test_validation_failure_exit(tmp_path):
    cfg = _load("validate_lqcn1.json")
    cfg["problem"]["preset"] = "LQCN-2"  # mean-dependent drift
    cfg["thresholds"] = {"lipschitz": 1e-6}
    out = tmp_path / "o"
    assert run("validate", _write(tmp_path, cfg), out_dir=out) == EXIT_VALIDATION
    report = json.loads((out / "report.json").read_text())
    assert report["failures"] == ["lipschitz"]
    assert _manifest(out)["outputs"] == ["report.json"]


def test_validate_passes(tmp_path):
    out = tmp_path / "o"
    assert run("validate", CONFIGS / "validate_lqcn1.json", out_dir=out) == EXIT_OK
    assert json.loads((out / "report.json").read_text())["nonanticipativity"]["ok"]


def _small_optimize():
    cfg = _load("optimize_lqcn1.json")
    cfg["grid"]["steps"] = 10
    cfg["particles"] = {"M": 4, "N": 30}
    cfg["search"]["resolution"] = [1, 5, 1]
    cfg["search"]["refine_levels"] = 0
    return cfg


def test_expectation_breach_exit(tmp_path):
    cfg = _small_optimize()
    cfg["expect"] = {"params": [0.0, 0.7, 0.0], "params_tol": 0.01}
    out = tmp_path / "o"
    assert run("optimize", _write(tmp_path, cfg), out_dir=out) == EXIT_THRESHOLD
    man = _manifest(out)
    assert man["exit_code"] == EXIT_THRESHOLD and "params" in man["message"]
    assert "trace.csv" in man["outputs"]


def test_seed_override_and_csv_format(tmp_path):
    cfg = _small_optimize()
    del cfg["expect"]
    out = tmp_path / "o"
    assert run("optimize", _write(tmp_path, cfg), seed=42, out_dir=out, fmt="csv") == EXIT_OK
    man = _manifest(out)
    assert man["seed"] == 42
    assert (out / "report.csv").read_text().startswith("param_index,value")


def test_threads_do_not_change_artifacts(tmp_path):
    cfg = _write(tmp_path, _load("simulate_lqcn1.json"))
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("simulate", cfg, out_dir=a, threads=1) == EXIT_OK
    assert run("simulate", cfg, out_dir=b, threads=3) == EXIT_OK
    for name in ("report.json", "ensemble.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_dpp_check_small(tmp_path):
    cfg = _load("dpp_lqcn1.json")
    cfg["grid"]["steps"] = 10
    cfg["particles"] = {"M": 6, "N": 50}
    cfg["inner"] = {"M": 3, "N": 50}
    cfg["search"]["resolution"] = [1, 1, 1]
    cfg["search"]["bounds"] = [[0, 0], [1, 1], [1, 1]]
    out = tmp_path / "o"
    assert run("dpp-check", _write(tmp_path, cfg), out_dir=out) == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    assert rep["label"] in ("consistent", "family-limited", "violation")
    assert len((out / "scenarios.csv").read_text().splitlines()) == 7


def test_dpp_bad_stopping_time(tmp_path):
    cfg = _load("dpp_lqcn1.json")
    cfg["stopping"] = {"kind": "deterministic", "time": 0.0}
    assert run("dpp-check", _write(tmp_path, cfg), out_dir=tmp_path / "o") == EXIT_CONFIG


@pytest.mark.parametrize("name", ["discrete_two_state.json", "discrete_random.json"])
def test_discrete_check(tmp_path, name):
    out = tmp_path / "o"
    assert run("discrete-check", CONFIGS / name, out_dir=out) == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    assert rep["failed"] == []
    assert all(c["defect"] < 1e-12 for c in rep["certificates"])


def test_markov_mismatch_is_a_validation_failure(tmp_path):
    cfg = _load("markov_lqcn1.json")
    cfg["phi"] = {"kind": "running-max"}
    cfg["laws"][1]["atoms"][0] = [5.0] * len(cfg["laws"][1]["atoms"][0])
    out = tmp_path / "o"
    assert run("markov-check", _write(tmp_path, cfg), out_dir=out) == EXIT_VALIDATION
    assert "pushforward" in _manifest(out)["message"]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mkvlab", "discrete-check", "--config",
                          str(CONFIGS / "discrete_two_state.json"), "--out-dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "manifest.json").exists()
    ver = subprocess.run([sys.executable, "-m", "mkvlab", "--version"], capture_output=True, text=True)
    assert ver.returncode == 0 and ver.stdout.strip()
