import json

import pytest

from mvgame.cli import main
from mvgame.io import read_csv


def run(*args):
    return main([str(a) for a in args])


def test_validate_exit_codes(problems_dir, capsys):
    assert run("validate", problems_dir / "toy_1d.json") == 0
    assert run("validate", problems_dir / "invalid_k2_zero.json") == 2
    out = capsys.readouterr().out
    assert "invertible-noise-gain" in out and "K₂" in out
    assert run("validate", "--config", problems_dir / "malformed.json") == 1
    err = capsys.readouterr().err
    assert "line 3, column" in err


def test_usage_errors(problems_dir, tmp_path):
    assert run("simulate", problems_dir / "toy_1d.json", "--paths", 0, "--out", tmp_path) == 1
    assert run("synthesize", problems_dir / "toy_1d.json", "--dt", 0.3, "--out", tmp_path) == 1
    assert run("synthesize", tmp_path / "missing.json") == 1
    assert run("synthesize") == 1
    assert run("frobnicate") == 1
    assert run("synthesize", problems_dir / "invalid_k2_zero.json", "--out", tmp_path) == 2


def test_synthesize_outputs(problems_dir, tmp_path):
    assert run("synthesize", problems_dir / "toy_1d.json", "--out", tmp_path) == 0
    meta, header, data = read_csv(tmp_path / "gains.csv")
    assert header[:2] == ["t", "P_00"] and data.shape == (1001, 8)
    assert meta["tool"] == "mvgame" and "spec_digest" in meta and meta["grid"]["N"] == 1000
    lam = json.loads((tmp_path / "lambda.json").read_text())
    assert lam["lambda1"][0] == pytest.approx(1.5) and max(lam["residuals"]) < 1e-12


def test_synthesize_uncoupled(problems_dir, tmp_path):
    assert run("synthesize", problems_dir / "uncoupled.json", "--out", tmp_path) == 0
    lam = json.loads((tmp_path / "lambda.json").read_text())
    assert max(lam["residuals"]) <= 1e-12


def test_synthesize_blowup(problems_dir, tmp_path, capsys):
    assert run("synthesize", problems_dir / "blowup.json", "--out", tmp_path) == 3
    assert "t=0.309" in capsys.readouterr().err


def test_dt_override(problems_dir, tmp_path):
    assert run("synthesize", problems_dir / "toy_1d.json", "--dt", 0.01, "--out", tmp_path) == 0
    _, _, data = read_csv(tmp_path / "gains.csv")
    assert data.shape[0] == 101


def test_simulate_and_plot(problems_dir, tmp_path):
    assert run("simulate", problems_dir / "toy_1d.json", "--paths", 20, "--save", 3,
               "--seed", 7, "--dt", 0.01, "--out", tmp_path) == 0
    meta, header, data = read_csv(tmp_path / "paths.csv")
    assert meta["seed"] == 7 and data.shape[0] == 3 * 101
    assert header[:5] == ["path", "t", "X_0", "Y1", "Y2"]
    assert run("plot", tmp_path / "paths.csv", "--columns", "X_0", "Xhat_0",
               "--out", tmp_path / "x.svg") == 0
    assert (tmp_path / "x.svg").read_text().count("<polyline") == 2
    assert run("plot", tmp_path / "paths.csv", "--columns", "nope", "--out", tmp_path) == 1


def test_plot_gains_single_polyline(problems_dir, tmp_path):
    assert run("synthesize", problems_dir / "toy_1d.json", "--out", tmp_path) == 0
    assert run("plot", tmp_path / "gains.csv", "--columns", "P_00", "--out", tmp_path / "p.svg") == 0
    svg = (tmp_path / "p.svg").read_text()
    assert svg.count("<polyline") == 1 and "spec_digest" in svg.splitlines()[0]


def test_filter_and_evaluate(problems_dir, tmp_path):
    args = (problems_dir / "toy_1d.json", "--dt", 0.01, "--out", tmp_path)
    assert run("filter", *args, "--particles", 100) == 0
    _, header, data = read_csv(tmp_path / "filter.csv")
    assert header[:4] == ["t", "xhat_0", "Sigma_00", "Xi1_00"] and data.shape[0] == 101
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert set(diag) >= {"meta", "follower", "leader"}
    assert run("evaluate", *args, "--paths", 500) == 0
    _, header, data = read_csv(tmp_path / "costs.csv")
    assert header == ["which", "value", "stderr", "running", "mean", "variance", "n_paths", "seed"]


def test_verify_writes_report(problems_dir, tmp_path):
    code = run("verify", problems_dir / "toy_1d.json", "--dt", 0.01, "--paths", 2000,
               "--particles", 400, "--out", tmp_path)
    rep = json.loads((tmp_path / "report.json").read_text())
    failed = [c["name"] for c in rep["checks"] if c["status"] != "pass"]
    assert code == (0 if not failed else 4)
    assert rep["meta"]["seed"] == 42 and rep["meta"]["settings"]["n_paths"] == 2000
    names = [c["name"] for c in rep["checks"]]
    assert "smp_stationarity" in names and "perturbation_leader_2" in names


def test_rerun_is_byte_identical(problems_dir, tmp_path):
    for d in ("a", "b"):
        assert run("synthesize", problems_dir / "toy_1d.json", "--out", tmp_path / d) == 0
        assert run("simulate", problems_dir / "toy_1d.json", "--dt", 0.01, "--paths", 5,
                   "--out", tmp_path / d) == 0
    for f in ("gains.csv", "lambda.json", "paths.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
