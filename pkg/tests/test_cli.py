import json
import shutil
import subprocess
import sys
from datetime import date

import pytest

from habnet import cli, cmr
from habnet import groundtruth as G
from habnet import heads as H
from habnet.errors import NumericalError


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch):
    # main() exports the offline switch; keep it from leaking between tests
    monkeypatch.setenv(cmr.OFFLINE_ENV, "")


@pytest.fixture(scope="module")
def cubes(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "cubes"
    assert cli.main(["--seed", "1", "synth-gen", "--out", str(out), "--events", "10"]) == 0
    return out


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_synth_gen_outputs(cubes):
    idx = json.loads((cubes / "index.json").read_text())
    assert len(list(cubes.glob("*.habc"))) == 20
    assert (cubes / "manifest.json").exists()
    assert "synth_config" in json.dumps(idx)


def test_evaluate_five_folds(cubes, tmp_path):
    out = tmp_path / "eval.json"
    assert run("evaluate", "--cubes", cubes, "--head", "mlp0", "--epochs", "3", "--channels", "4", "--out", out) == 0
    rep = json.loads(out.read_text())
    assert len(rep) == 1 and len(rep[0]["folds"]) == 5
    assert sum(f["n_test"] for f in rep[0]["folds"]) == 20
    assert out.with_suffix(".txt").read_text().startswith("Head")
    m = json.loads((tmp_path / "eval.json.manifest.json").read_text())
    assert m["settings"]["folds"] == 5 and m["inputs"]


def test_window_flag_sets_horizon(cubes, tmp_path):
    out = tmp_path / "eval.json"
    assert run("evaluate", "--cubes", cubes, "--head", "svm", "--encoder", "crop_raw", "--window", "pred_8",
               "--folds", "2", "--out", out) == 0
    rep = json.loads(out.read_text())[0]
    assert rep["window"] == "pred_8" and rep["horizon_days"] == 2 and rep["days"] == list(range(1, 9))


def test_baseline_json(cubes, tmp_path):
    out = tmp_path / "base.json"
    assert run("baseline", "--cubes", cubes, "--out", out) == 0
    doc = json.loads(out.read_text())
    assert len(doc["available_rules"]) == 6 and len(doc["rules"]) == 6
    for r in doc["rules"]:
        assert sum(r["confusion"].values()) + r["n_excluded"] == 20
    assert run("baseline", "--cubes", cubes, "--rule", "ss488,anom1", "--out", out) == 0
    assert [r["rule"] for r in json.loads(out.read_text())["rules"]] == ["SS(488)<0.0", "Chla_Anom>1.0"]


def test_train_forecast_importance_report(cubes, tmp_path):
    b = tmp_path / "bundle"
    assert run("train", "--cubes", cubes, "--head", "rf", "--encoder", "crop_raw", "--window", "pred_6", "--out", b) == 0
    assert {p.name for p in b.iterdir()} >= {"head.habh", "bundle.json", "encoder.npz", "manifest.json"}
    f = tmp_path / "fc.json"
    assert run("forecast", "--bundle", b, "--cubes", cubes, "--out", f) == 0
    fc = json.loads(f.read_text())
    assert fc["horizon_days"] == 4 and len(fc["predictions"]) == 20
    assert all(0.0 <= p["probability"] <= 1.0 for p in fc["predictions"])
    imp = tmp_path / "imp.json"
    assert run("importance", "--cubes", cubes, "--encoder", "crop_raw", "--n-estimators", "20", "--out", imp) == 0
    doc = json.loads(imp.read_text())
    assert len(doc["matrix"]) == 2 and len(doc["matrix"][0]) == 10 and len(doc["ranking"]) == 20
    base = tmp_path / "base.json"
    run("baseline", "--cubes", cubes, "--out", base)
    rep = tmp_path / "r.txt"
    assert run("report", base, "--out", rep) == 0
    assert rep.read_text().startswith("Rule")


def test_usage_errors_exit_1(cubes, tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["evaluate"])
    assert e.value.code == 1
    assert run("baseline", "--cubes", cubes, "--rule", "nope", "--out", tmp_path / "x.json") == 1
    assert run("evaluate", "--cubes", cubes, "--window", "pred_x", "--out", tmp_path / "x.json") == 1


def test_data_errors_exit_2(tmp_path):
    assert run("evaluate", "--cubes", tmp_path / "missing", "--out", tmp_path / "x.json") == 2
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "index.json").write_text("{not json")
    assert run("baseline", "--cubes", bad, "--out", tmp_path / "x.json") == 2


def test_numerical_failure_exit_3(cubes, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("loss became nan")

    monkeypatch.setattr(H, "train_head", boom)
    assert run("evaluate", "--cubes", cubes, "--encoder", "crop_raw", "--folds", "2", "--out", tmp_path / "x.json") == 3


def test_offline_search_never_touches_network(tmp_path, no_network):
    ev = tmp_path / "events.json"
    G.write_events_json([G.EventRecord("e1", 27.0, -82.5, date(2018, 1, 10), "Karenia brevis", 1e5, "HAB")], ev)
    assert run("--offline", "search-granules", "--events", ev, "--out", tmp_path / "g.json") == 2
    assert no_network == []


def test_manifests_are_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("--seed", "4", "synth-gen", "--out", tmp_path / d, "--events", "2", "--modalities", "3") == 0
    a, b = tmp_path / "a" / "manifest.json", tmp_path / "b" / "manifest.json"
    assert a.read_bytes() == b.read_bytes()
    for f in (tmp_path / "a").glob("*.habc"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_config_precedence(cubes, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"folds": 3, "evaluate": {"heads": "svm"}, "encoder": "crop_raw"}))
    out = tmp_path / "e.json"
    assert run("--config", cfg, "evaluate", "--cubes", cubes, "--folds", "2", "--out", out) == 0
    m = json.loads((tmp_path / "e.json.manifest.json").read_text())["settings"]
    assert m["folds"] == 2  # flag beats file
    assert m["heads"] == "svm" and m["encoder"] == "crop_raw"  # file beats default
    assert m["inner_fraction"] == 0.8  # default
    toml = tmp_path / "c.toml"
    toml.write_text('folds = 2\nencoder = "crop_raw"\n[evaluate]\nheads = "rf"\n')
    assert run("--config", toml, "evaluate", "--cubes", cubes, "--out", out) == 0
    assert json.loads(out.read_text())[0]["head"] == "RF"


def test_console_script_help():
    exe = shutil.which("habnet")
    cmd = [exe, "--help"] if exe else [sys.executable, "-m", "habnet.cli", "--help"]
    res = subprocess.run(cmd, capture_output=True, text=True)
    assert res.returncode == 0 and "synth-gen" in res.stdout
