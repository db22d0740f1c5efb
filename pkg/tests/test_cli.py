"""Command-line surface: exit codes, artifacts, overrides, reproducibility."""

import json
import os

import numpy as np
import pytest

from affinelq.cli import run

SCALAR_FINITE = {
    "dims": {"n": 1, "k": 1, "d": 1},
    "model": {
        "kind": "constant",
        "A": [[-1.0]], "B": [[1.0]], "C": [[[0.5]]], "D": [[[0.2]]],
        "S": [[1.0]], "f": [0.3],
    },
    "x0": [0.7],
    "horizon": {"type": "finite", "T": 2.0},
    "lattice": {"depth": 10},
    "mc": {"paths": 500, "seed": 7, "time_step": 0.01, "workers": 1},
}


def _write(tmp_path, payload, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def _summary(out_dir):
    return json.loads((out_dir / "summary.json").read_text())


def test_validate_ok(tmp_path, capsys):
    cfg = _write(tmp_path, SCALAR_FINITE)
    out = tmp_path / "out"
    assert run(["validate", cfg, "--out-dir", str(out), "--json"]) == 0
    summary = _summary(out)
    assert summary["status"] == "ok"
    assert summary["dissipativity_margin"] > 0.0
    streamed = json.loads(capsys.readouterr().out)
    assert streamed == summary


def test_config_error_exit_2(tmp_path, capsys):
    bad = json.loads(json.dumps(SCALAR_FINITE))
    bad["model"]["S"] = [[-1.0]]
    cfg = _write(tmp_path, bad)
    assert run(["validate", cfg, "--out-dir", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "model.S" in err


def test_missing_key_exit_2(tmp_path, capsys):
    bad = json.loads(json.dumps(SCALAR_FINITE))
    del bad["dims"]
    cfg = _write(tmp_path, bad)
    assert run(["validate", cfg, "--out-dir", str(tmp_path / "o")]) == 2
    assert "dims" in capsys.readouterr().err


def test_malformed_json_exit_2(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{oops")
    assert run(["validate", str(path), "--out-dir", str(tmp_path / "o")]) == 2
    assert "line 1" in capsys.readouterr().err


def test_solver_error_exit_3(tmp_path, capsys):
    bad = json.loads(json.dumps(SCALAR_FINITE))
    bad["model"]["A"] = [[1.0]]
    bad["model"]["B"] = [[0.0]]
    bad["model"]["f"] = [0.0]
    bad["horizon"] = {"type": "infinite", "tol": 1e-9}
    cfg = _write(tmp_path, bad)
    assert run(["riccati-infinite", cfg, "--out-dir", str(tmp_path / "o")]) == 3
    assert "NotStabilizable" in capsys.readouterr().err


def test_verify_breach_exit_4(tmp_path):
    strict = json.loads(json.dumps(SCALAR_FINITE))
    strict["tolerances"] = {"dp": 1e-30}
    cfg = _write(tmp_path, strict)
    out = tmp_path / "o"
    assert run(["verify", cfg, "--out-dir", str(out)]) == 4
    summary = _summary(out)
    assert summary["status"] == "breach"
    assert "dp_P" in summary["breaches"]


def test_verify_clean_run(tmp_path):
    cfg = _write(tmp_path, SCALAR_FINITE)
    out = tmp_path / "o"
    assert run(["verify", cfg, "--out-dir", str(out)]) == 0
    summary = _summary(out)
    assert summary["breaches"] == []
    for name, check in summary["checks"].items():
        assert check["pass"], name


def test_riccati_finite_artifacts(tmp_path):
    cfg = _write(tmp_path, SCALAR_FINITE)
    out = tmp_path / "o"
    assert run(["riccati-finite", cfg, "--out-dir", str(out)]) == 0
    summary = _summary(out)
    assert summary["source"] == "ode"
    assert (out / "riccati.csv").exists()
    header = (out / "riccati.csv").read_text().splitlines()[0]
    assert header.startswith("t,node,P_0_0")
    manifest = json.loads((out / "manifest.json").read_text())
    assert {"scenario_hash", "subcommand", "outputs", "wallclock_seconds"} <= set(manifest)
    assert "wallclock_seconds" not in summary


def test_lattice_route_flag(tmp_path):
    cfg = _write(tmp_path, SCALAR_FINITE)
    out = tmp_path / "o"
    assert run(["riccati-finite", cfg, "--out-dir", str(out), "--route", "lattice"]) == 0
    assert _summary(out)["source"] == "lattice"


def test_dual_duality_note_on_ode_route(tmp_path):
    cfg = _write(tmp_path, SCALAR_FINITE)
    out = tmp_path / "o"
    assert run(["dual", cfg, "--out-dir", str(out), "--check-duality"]) == 0
    summary = _summary(out)
    assert summary["duality_residual"] is None
    assert "lattice" in summary["duality_note"]
    out2 = tmp_path / "o2"
    assert run([
        "dual", cfg, "--out-dir", str(out2), "--check-duality", "--route", "lattice",
    ]) == 0
    assert _summary(out2)["duality_residual"] is not None


def test_simulate_reproducible_across_workers(tmp_path):
    cfg = _write(tmp_path, SCALAR_FINITE)
    outs = []
    for workers, name in ((1, "w1"), (8, "w8")):
        out = tmp_path / name
        code = run([
            "simulate", cfg, "--out-dir", str(out), "--policy", "feedback",
            "--workers", str(workers),
        ])
        assert code == 0
        outs.append((out / "summary.json").read_bytes())
    assert outs[0] == outs[1]


def test_simulate_seed_override_changes_estimate(tmp_path):
    cfg = _write(tmp_path, SCALAR_FINITE)
    vals = []
    for seed in (7, 8):
        out = tmp_path / f"s{seed}"
        assert run([
            "simulate", cfg, "--out-dir", str(out), "--seed", str(seed),
        ]) == 0
        vals.append(_summary(out)["estimate"])
    assert vals[0] != vals[1]


def test_openloop_policy_requires_config_key(tmp_path, capsys):
    cfg = _write(tmp_path, SCALAR_FINITE)
    assert run([
        "simulate", cfg, "--out-dir", str(tmp_path / "o"), "--policy", "openloop",
    ]) == 2
    assert "openloop_u" in capsys.readouterr().err


def test_ergodic_alphas_override(tmp_path):
    payload = {
        "dims": {"n": 1, "k": 1, "d": 1},
        "model": {
            "kind": "constant",
            "A": [[-1.0]], "B": [[1.0]], "C": [[[0.0]]], "D": [[[0.0]]],
            "S": [[1.0]], "f": [1.0],
        },
        "x0": [1.0],
        "horizon": {"type": "discounted", "alpha_grid": [0.4, 0.2, 0.1, 0.05]},
        "mc": {"paths": 100, "seed": 1, "time_step": 0.01, "workers": 1},
    }
    cfg = _write(tmp_path, payload)
    out = tmp_path / "o"
    assert run(["ergodic", cfg, "--out-dir", str(out), "--alphas", "0.4,0.2,0.1"]) == 0
    summary = _summary(out)
    assert [row["alpha"] for row in summary["rows"]] == [0.4, 0.2, 0.1]
    assert (out / "ergodic.csv").exists()


def test_out_dir_env_var(tmp_path, monkeypatch):
    cfg = _write(tmp_path, SCALAR_FINITE)
    target = tmp_path / "from_env"
    monkeypatch.setenv("AFFINELQ_OUT_DIR", str(target))
    assert run(["validate", cfg]) == 0
    assert (target / "summary.json").exists()


def test_scenario_hash_stable_under_workers_but_not_seed(tmp_path):
    cfg = _write(tmp_path, SCALAR_FINITE)

    def hash_for(extra):
        out = tmp_path / ("h" + "_".join(extra).replace("-", ""))
        assert run(["simulate", cfg, "--out-dir", str(out)] + extra) == 0
        return json.loads((out / "manifest.json").read_text())["scenario_hash"]

    assert hash_for(["--workers", "1"]) == hash_for(["--workers", "4"])
    assert hash_for(["--seed", "7"]) != hash_for(["--seed", "9"])
