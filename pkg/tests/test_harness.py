import csv
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from expreg import harness
from expreg.datamodel import Dataset, write_dataset
from expreg.kernel import read_kernel_csv
from expreg.training import read_trace_csv

FAST = ["--m", "200", "--max_steps", "5", "--trials", "3", "--mc_samples", "2000"]


def run(cmd, out, *extra):
    return harness.main([cmd, "--out", str(out), *extra])


def test_train_zero_steps(tmp_path):
    assert run("train", tmp_path, "--T", "0") == 0
    tr = read_trace_csv(tmp_path / "trace_seed0.csv")
    assert tr.t == [0]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["runs"][0]["steps"] == 0


def test_train_summary_matches_traces(tmp_path):
    assert run("train", tmp_path, *FAST, "--seeds", "0,3") == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert [r["seed"] for r in summary["runs"]] == [0, 3]
    for r in summary["runs"]:
        tr = read_trace_csv(tmp_path / f"trace_seed{r['seed']}.csv")
        assert r["final_loss"] == tr.loss[-1]
        assert r["initial_loss"] == tr.loss[0]
        assert r["steps"] == tr.t[-1] == 5
        assert r["max_drift"] == max(tr.max_drift)
        assert r["reached_eps"] == (tr.loss[-1] <= summary["config"]["eps"])
        hits = [t for t, v in zip(tr.t, tr.loss) if v <= summary["config"]["eps"]]
        assert r["steps_to_eps"] == (hits[0] if hits else None)


def test_train_is_bit_reproducible(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", a, *FAST, "--seeds", "1,2") == 0
    monkeypatch.setenv("EXPREG_THREADS", "2")
    assert run("train", b, *FAST, "--seeds", "1,2") == 0
    for name in ("trace_seed1.csv", "trace_seed2.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_unwritable_output_leaves_no_files(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("train", blocker / "sub", "--T", "0") != 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["file"]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"m": 100, "T": 2, "seeds": [4], "sigma": 0.3}))
    out = tmp_path / "out"
    assert harness.main(["train", "--config", str(cfg), "--out", str(out), "--T", "1"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["m"] == 100 and summary["config"]["sigma"] == 0.3
    assert summary["runs"][0]["steps"] == 1 and summary["runs"][0]["seed"] == 4


def test_bad_configs_exit_nonzero(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"not_a_field": 1}))
    assert harness.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == harness.EXIT_CONFIG
    assert run("train", tmp_path / "o", "--seeds", "[]") == harness.EXIT_CONFIG
    assert run("train", tmp_path / "o", "--m", "abc") == harness.EXIT_CONFIG
    assert run("train", tmp_path / "o", "--m", "7", "--T", "1") == harness.EXIT_CONFIG
    monkeypatch.setenv("EXPREG_THREADS", "0")
    assert run("train", tmp_path / "o", "--T", "0") == harness.EXIT_CONFIG


def test_ntk_outputs(tmp_path):
    assert run("ntk", tmp_path, *FAST, "--seeds", "0,1") == 0
    spectral = json.loads((tmp_path / "spectral.json").read_text())
    Kc = read_kernel_csv(tmp_path / "h_cts_closed.csv")
    assert Kc.kind == "cts_closed" and Kc.n == 8
    assert read_kernel_csv(tmp_path / "h_cts_mc.csv").kind == "cts_mc"
    assert read_kernel_csv(tmp_path / "h_dis_seed1.csv").kind == "dis"
    assert spectral["lambda_cts"] > 0 and len(spectral["dis"]) == 2
    gaps = [row["median_fro_gap"] for row in spectral["m_sweep"]]
    assert gaps == sorted(gaps, reverse=True)


def test_ntk_orthonormal_dataset(tmp_path):
    path = tmp_path / "ortho.txt"
    write_dataset(Dataset(np.eye(3), np.array([0.1, -0.2, 0.3])), path)
    out = tmp_path / "out"
    assert run("ntk", out, "--dataset_file", str(path), "--m", "10", "--mc_samples", "100", "--m_grid", "[]") == 0
    H = read_kernel_csv(out / "h_cts_closed.csv").H
    assert np.all(H[~np.eye(3, dtype=bool)] == 0.0)


def test_ntk_missing_dataset(tmp_path):
    assert run("ntk", tmp_path / "o", "--dataset_file", str(tmp_path / "none.txt")) != 0
    assert not (tmp_path / "o" / "spectral.json").exists()


def test_verify_default_config_passes(tmp_path):
    assert run("verify", tmp_path) == 0
    doc = json.loads((tmp_path / "verdict.json").read_text())
    assert doc["all_pass"] is True
    names = [c["name"] for c in doc["checks"]]
    assert "claim.C3[seed=0]" in names and "perturbed_w" in names and "kernel_concentration.scaling" in names
    assert any(c["name"].startswith("kernel_concentration.part1[m=") and not c["diagnostic"] for c in doc["checks"])


def test_verify_smoke_run_is_fast(tmp_path):
    start = time.perf_counter()
    status = run("verify", tmp_path, "--trials", "1")
    assert time.perf_counter() - start < 60
    assert status in (0, 1)
    assert (tmp_path / "verdict.json").exists()


def test_verify_surfaces_precondition(tmp_path):
    assert run("verify", tmp_path, "--sigma", "0.0001", "--R", "0.005") == harness.EXIT_CONFIG
    assert not (tmp_path / "verdict.json").exists()


def read_sweep(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_sweep_empty_grid_is_config_error(tmp_path):
    assert run("sweep", tmp_path, "--m_grid", "[]") == harness.EXIT_CONFIG


def test_single_point_sweep_matches_train_and_ntk(tmp_path):
    common = ["--m", "300", "--m_grid", "300", "--max_steps", "4", "--trials", "2", "--mc_samples", "500"]
    assert run("sweep", tmp_path / "s", *common) == 0
    assert run("train", tmp_path / "t", *common) == 0
    assert run("ntk", tmp_path / "n", *common) == 0
    rows = {(r["seed"], r["metric"]): r["value"] for r in read_sweep(tmp_path / "s" / "sweep.csv")}
    run0 = json.loads((tmp_path / "t" / "summary.json").read_text())["runs"][0]
    spectral = json.loads((tmp_path / "n" / "spectral.json").read_text())
    assert float(rows[("0", "final_loss")]) == run0["final_loss"]
    assert int(float(rows[("0", "steps")])) == run0["steps"]
    assert float(rows[("0", "lambda")]) == spectral["lambda_cts"]
    assert float(rows[("0", "lambda_dis")]) == spectral["dis"][0]["lambda_dis"]


def test_sweep_pass_rate_rises_with_width(tmp_path):
    # three points keep the concentration threshold near 10^4
    ds_path = tmp_path / "d.txt"
    from expreg.datamodel import gen_dataset

    write_dataset(gen_dataset(3, 8, 2), ds_path)
    args = ["--dataset_file", str(ds_path), "--m_grid", "50,40000", "--max_steps", "1", "--trials", "10"]
    assert run("sweep", tmp_path / "o", *args) == 0
    rows = read_sweep(tmp_path / "o" / "sweep.csv")
    rate = {int(r["m"]): float(r["value"]) for r in rows if r["metric"] == "conc_part1_pass_rate"}
    m_star = [float(r["value"]) for r in rows if r["metric"] == "m_star"]
    assert 50 < min(m_star) and max(m_star) < 40000
    assert rate[50] < rate[40000] == 1.0


def test_sigma_grid_rows(tmp_path):
    assert run("sweep", tmp_path, "--m_grid", "100", "--sigma_grid", "0.2,0.3", "--max_steps", "1", "--trials", "2") == 0
    sigmas = {r["sigma"] for r in read_sweep(tmp_path / "sweep.csv")}
    assert sigmas == {"0.20000000000000001", "0.29999999999999999"}


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "expreg", "train", "--out", str(tmp_path), "--T", "0"], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "trace_seed0.csv").exists()


def test_parse_field_types():
    assert harness.parse_field("m", "12") == 12
    assert harness.parse_field("eta", "none") is None
    assert harness.parse_field("early_stop", "false") is False
    assert harness.parse_field("seeds", "1,2,3") == [1, 2, 3]
    assert harness.parse_field("m_grid", "[10, 20]") == [10, 20]
    assert math.isclose(harness.parse_field("sigma", "0.5"), 0.5)
    with pytest.raises(harness.ConfigError):
        harness.parse_field("early_stop", "maybe")
