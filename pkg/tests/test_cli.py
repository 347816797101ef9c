import csv
import json

import pytest

from collidernet import cli
from collidernet import autodiff as ad

TINY = {"n_train": 120, "n_val": 80, "pool_size": 150, "image_size": 24, "max_epochs": 1,
        "patience": 1, "oracle_n": 2000}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def test_print_default_config(capsys):
    assert cli.main(["--print-default-config"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["n_train"] == 3000 and d["image_size"] == 51


def test_simulate_default_sizes(tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path), "-q"]) == 0
    assert len((tmp_path / "cohort_train.csv").read_text().splitlines()) == 3001
    assert len((tmp_path / "cohort_val.csv").read_text().splitlines()) == 1001


def test_simulate_n(tmp_path):
    assert cli.main(["simulate", "--n", "10", "--out", str(tmp_path), "--seed", "9"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "cohort.csv")))
    assert len(rows) == 10 and list(rows[0]) == ["u1", "u2", "z", "x", "t", "y"]
    assert json.loads((tmp_path / "cohort.json").read_text())["seed"] == 9


def test_config_errors_exit_2_before_writing(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scm": {"sd_x": -1}}))
    out = tmp_path / "never"
    assert cli.main(["simulate", "--config", str(bad), "--out", str(out)]) == 2
    assert "sd_x" in capsys.readouterr().err
    assert not out.exists()
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(out)]) == 2
    assert cli.main(["train", "--image-size", "10", "--out", str(out)]) == 2
    assert cli.main(["--out", str(out)]) == 2


def test_runtime_error_exit_3(tmp_path, tiny_config):
    # evaluate without trained nets in --out
    assert cli.main(["evaluate", "--config", str(tiny_config), "--out", str(tmp_path), "-q"]) == 3


def test_staged_pipeline(tmp_path, tiny_config, capsys):
    base = ["--config", str(tiny_config), "--out", str(tmp_path), "-q"]
    assert cli.main(["build-pool"] + base) == 0
    assert (tmp_path / "pool_train.f32").exists() and (tmp_path / "pool_val.json").exists()
    assert cli.main(["calibrate"] + base) == 0
    assert cli.main(["train", "--mode", "causal"] + base) == 0
    assert cli.main(["train", "--mode", "biased"] + base) == 0
    capsys.readouterr()
    assert cli.main(["evaluate"] + base) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "model,variables,mse_y,ate" and len(lines) == 6
    assert (tmp_path / "manifest.json").exists()


def test_reproduce_and_seed_override(tmp_path, tiny_config):
    args = ["reproduce", "--config", str(tiny_config), "--replicates", "2", "--seed", "40", "-q"]
    assert cli.main(args + ["--out", str(tmp_path)]) == 0
    (run,) = tmp_path.glob("run-*")
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["seeds"]["scm"] == 40 and cfg["seeds"]["train"] == 44
    agg = list(csv.DictReader(open(run / "aggregate.csv")))
    assert len(agg) == 5 and agg[0]["replicates"] == "2"
    assert (run / "replicate_01" / "results.csv").exists()


def test_gradcheck_detects_corruption(tmp_path, monkeypatch):
    assert cli.main(["gradcheck", "--out", str(tmp_path / "ok"), "-q"]) == 0
    assert "FAIL" not in (tmp_path / "ok" / "gradcheck.txt").read_text()

    real = ad.relu

    def leaky_backward(x):
        out = real(x)
        fwd = out._backward
        out._backward = lambda g: [(p, 0.5 * gp) for p, gp in fwd(g)]
        return out

    monkeypatch.setattr(ad, "relu", leaky_backward)
    assert cli.main(["gradcheck", "--out", str(tmp_path / "bad"), "-q"]) == 4
    assert "FAIL" in (tmp_path / "bad" / "gradcheck.txt").read_text()
