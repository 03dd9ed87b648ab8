import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from jsmix import cli, io
from jsmix.errors import InvariantViolation

FIT_FLAGS = ["--chains", "2", "--iters", "300", "--burnin", "100", "--augment", "60", "--seed", "5"]


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--scenario", 10, "--m-star", 120, "--seed", 3, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def fit_dir(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit") / "rpt"
    code = run("fit", "--data", sim_dir / "captures.csv", "--occasions", sim_dir / "occasions.csv",
               "--model", "rpt", *FIT_FLAGS, "--out", out)
    assert code == 0
    return out


def _tree_bytes(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_simulate_outputs(sim_dir):
    truth = json.loads((sim_dir / "truth.json").read_text())
    data = io.read_capture_csv(sim_dir / "captures.csv")
    assert data.D == truth["D"] and data.T == 10
    assert len(io.read_occasions_csv(sim_dir / "occasions.csv").offsets) == 10
    assert (sim_dir / "truth_labels.csv").read_text().startswith("id,group\n")


def test_fit_outputs(fit_dir):
    for name in ("manifest.json", "summary.json", "membership.csv", "waic.json", "draws_survival.csv"):
        assert (fit_dir / name).exists(), name
    summary = json.loads((fit_dir / "summary.json").read_text())
    ns = summary["abundance"]["N_super"]
    assert ns["lower"] <= ns["median"] <= ns["upper"]
    manifest = json.loads((fit_dir / "manifest.json").read_text())
    assert {"config_hash", "seeds", "versions"} <= set(manifest)
    assert manifest["config_hash"] == io.config_hash(manifest["config"])
    head = (fit_dir / "draws_survival.csv").read_text().splitlines()[:2]
    assert head[0] == "chain,iter,parameter,value"
    assert head[1].startswith("1,100,phi[T],")


def test_fit_rerun_identical(sim_dir, fit_dir, tmp_path):
    out = tmp_path / "again"
    code = run("fit", "--data", sim_dir / "captures.csv", "--occasions", sim_dir / "occasions.csv",
               "--model", "rpt", *FIT_FLAGS, "--out", out)
    assert code == 0
    assert _tree_bytes(out) == _tree_bytes(fit_dir)


def test_manifest_replay_identical(fit_dir, tmp_path):
    out = tmp_path / "replay"
    assert run("fit", "--config", fit_dir / "manifest.json", "--out", out) == 0
    assert _tree_bytes(out) == _tree_bytes(fit_dir)


def test_fit_parallel_chains_identical(sim_dir, fit_dir, tmp_path):
    out = tmp_path / "par"
    code = run("fit", "--data", sim_dir / "captures.csv", "--occasions", sim_dir / "occasions.csv",
               "--model", "rpt", *FIT_FLAGS, "--jobs", 2, "--out", out)
    assert code == 0
    assert _tree_bytes(out) == _tree_bytes(fit_dir)


def test_load_fit_roundtrip(fit_dir):
    store, manifest = io.load_fit(fit_dir)
    assert store.n_chains == 2 and store.n_draws == len(manifest["iterations"]) == 100
    assert store.parameter_names() == [n for b in manifest["names"].values() for n in b]


def test_classify_and_diagnose(fit_dir, tmp_path, capsys):
    assert run("classify", "--fit", fit_dir, "--out", tmp_path / "m.csv") == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "id,p_R,p_P,p_T,map"
    probs = np.array([[float(x) for x in ln.split(",")[1:4]] for ln in lines[1:]])
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-10)
    assert run("diagnose", "--fit", fit_dir, "--out", tmp_path / "diag") == 0
    for name in ("rhat.csv", "overlap.csv", "traces.csv"):
        assert (tmp_path / "diag" / name).exists()
    assert "OV(phi[T], phi[NT])" in capsys.readouterr().out


def test_compare(sim_dir, fit_dir, tmp_path):
    m1 = fit_dir.parent / "m1"
    code = run("fit", "--data", sim_dir / "captures.csv", "--occasions", sim_dir / "occasions.csv",
               "--model", "m1", *FIT_FLAGS, "--out", m1)
    assert code == 0
    assert run("compare", fit_dir.parent, "--out", tmp_path / "cmp.csv") == 0
    rows = (tmp_path / "cmp.csv").read_text().splitlines()
    assert rows[0].startswith("model,waic")
    assert {r.split(",")[0] for r in rows[1:]} == {"rpt", "m1"}
    waics = [float(r.split(",")[1]) for r in rows[1:]]
    assert waics == sorted(waics)


def test_experiment_command(tmp_path):
    out = tmp_path / "exp"
    code = run("experiment", "--scenarios", 10, "--models", "rpt", "--replicas", 1,
               "--chains", 1, "--iters", 60, "--burnin", 20, "--augment", 100, "--seed", 1, "--out", out)
    assert code == 0
    assert (out / "metrics.csv").read_text().startswith("scenario,model")
    assert len(json.loads((out / "records.json").read_text())) == 1


def test_bad_input_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,t1,t2\na,1,2\n")
    occ = tmp_path / "o.csv"
    occ.write_text("t,day_offset\n1,0\n2,5\n")
    assert run("fit", "--data", bad, "--occasions", occ, "--out", tmp_path / "f") == 2
    assert "column 't2'" in capsys.readouterr().err
    assert run("fit", "--data", tmp_path / "missing.csv", "--occasions", occ, "--out", tmp_path / "f") == 2
    assert run("fit", "--model", "m42", "--data", bad, "--occasions", occ) == 2
    assert run("classify", "--fit", tmp_path) == 2


def test_invariant_exit_code(sim_dir, tmp_path, monkeypatch, capsys):
    def broken(*args, **kwargs):
        raise InvariantViolation("trajectory re-entered", dump={"iteration": 7})

    monkeypatch.setattr(cli, "run_fit", broken)
    code = run("fit", "--data", sim_dir / "captures.csv", "--occasions", sim_dir / "occasions.csv", "--out", tmp_path / "f")
    assert code == 3
    err = capsys.readouterr().err
    assert '"iteration": 7' in err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "jsmix", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "simulate" in res.stdout
