import json

import numpy as np
import pytest

from pomdp_learn.cli import run
from pomdp_learn.core import load_model, save_model, validate_model
from conftest import tiny_model

SMALL = ["--sequences", "2", "--length", "300", "--sweeps", "20", "--n-mc", "2000",
         "--episodes", "1000", "--seed", "3"]


def test_sample_size(capsys):
    assert run(["sample-size", "--alpha", "0.01", "--delta", "0.95"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "73778"
    assert any("73777" in line for line in out)


def test_usage_errors(capsys):
    assert run(["frobnicate"]) == 1
    assert run(["sample-size", "--alpha", "0.01", "--delta", "0.95", "--bogus"]) == 1
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err


def test_invalid_input_names_module(tmp_path, capsys):
    bad = tmp_path / "m.json"
    bad.write_text('{"states": ["a"]}')
    assert run(["plan", "--model", str(bad), "--horizon", "2"]) == 1
    assert "core-model" in capsys.readouterr().err
    assert run(["plan", "--model", str(tmp_path / "missing.json"), "--horizon", "2"]) == 1


def test_verify_bounds(tmp_path, capsys):
    out = tmp_path / "b.json"
    code = run(["verify-bounds", "--theorem", "2", "--epsilon", "0.5", "--horizon", "3",
                "--trials", "20", "--seed", "7", "--out", str(out)])
    assert code == 0
    assert capsys.readouterr().out.startswith("PASS")
    doc = json.loads(out.read_text())
    assert doc["report"]["pass"] and doc["config"]["seed"] == 7 and "version" in doc


def test_plan_and_evaluate(tmp_path, capsys):
    mpath, ppath, epath = tmp_path / "m.json", tmp_path / "p.json", tmp_path / "e.json"
    save_model(tiny_model(), mpath)
    assert run(["plan", "--model", str(mpath), "--horizon", "3", "--out", str(ppath)]) == 0
    value = json.loads(ppath.read_text())["value"]
    assert run(["evaluate", "--model", str(mpath), "--policy", str(ppath), "--episodes", "20000",
                "--out", str(epath)]) == 0
    ev = json.loads(epath.read_text())
    assert ev["value"] == pytest.approx(value, abs=1e-12)
    assert abs(ev["monte_carlo"]["mean"] - value) <= 4 * ev["monte_carlo"]["std_err"]


def test_stagewise_commands(tmp_path):
    data = tmp_path / "data"
    assert run(["gen-data", "--sequences", "2", "--length", "200", "--seed", "1", "--out", str(data)]) == 0
    post, labels = tmp_path / "post.json", tmp_path / "labels.csv"
    assert run(["learn-states", "--data", str(data / "series.csv"), "--out", str(post),
                "--labels-out", str(labels), "--sweeps", "30", "--seed", "2"]) == 0
    obs = tmp_path / "obs.json"
    assert run(["obs-matrix", "--posterior", str(post), "--n-mc", "5000", "--out", str(obs)]) == 0
    probs = np.array(json.loads(obs.read_text())["probs"])
    assert np.allclose(probs.sum(axis=1), 1)
    L = json.loads(post.read_text())["map_sample"]["num_states"]
    tr = tmp_path / "trans.json"
    assert run(["estimate-trans", "--labels", str(labels), "--num-states", str(L),
                "--actions", "none,warn", "--out", str(tr)]) == 0
    T = np.array(json.loads(tr.read_text())["transition"])
    assert T.shape == (2, L, L) and np.allclose(T.sum(axis=2), 1)


def test_pipeline_smoke(tmp_path):
    out = tmp_path / "run"
    assert run(["pipeline", "--out", str(out)] + SMALL) == 0
    for name in ("series.csv", "ground_truth.json", "posterior.json", "labels.csv", "obs_matrix.json",
                 "model.json", "policy.json", "evaluation.json", "report.json"):
        assert (out / name).exists(), name
    assert validate_model(load_model(out / "model.json")) == []
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["seed"] == 3 and report["model_violations"] == []


def test_pipeline_rerun_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["pipeline", "--out", str(a)] + SMALL) == 0
    assert run(["pipeline", "--out", str(b)] + SMALL) == 0
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_pipeline_config_file_and_override(tmp_path):
    cfg = tmp_path / "demo.json"
    cfg.write_text(json.dumps({"sequences": 2, "length": 250, "sweeps": 15, "n_mc": 1000,
                               "episodes": 500, "seed": 4, "horizon": 2}))
    out = tmp_path / "run"
    assert run(["pipeline", "--config", str(cfg), "--out", str(out), "--horizon", "3"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["config"]["horizon"] == 3 and rep["config"]["length"] == 250
    cfg.write_text(json.dumps({"lenght": 3}))
    assert run(["pipeline", "--config", str(cfg), "--out", str(out)]) == 1
