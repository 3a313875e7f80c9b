import json

import numpy as np
import pytest

from omgd.harness.cli import main
from omgd.harness.config import ConfigError, load_experiment, parse_int_list
from omgd.trace import RunTrace

SMALL = ["--T", "3000", "--seeds", "0-1", "--warmup", "10"]


def _small_config(tmp_path, extra=""):
    path = tmp_path / "exp.ini"
    path.write_text("[dataset]\nn = 40\nd = 4\n\n[run]\ncheckpoints = 16\n" + extra)
    return str(path)


def test_parse_int_list():
    assert parse_int_list("0-3, 7") == [0, 1, 2, 3, 7]
    assert parse_int_list("") == []


def test_masks_command_prints_pinned_family(capsys):
    assert main(["masks", "--d", "6", "--M", "4", "--pinned", "0,5", "--seed", "1"]) == 0
    out = capsys.readouterr().out.splitlines()
    rows = [list(map(float, ln.split())) for ln in out[:4]]
    assert np.all(np.sum(rows, axis=0) == 4.0)
    assert all(r[0] == 1 and r[5] == 1 for r in rows)
    assert out[4] == "sum OK"


def test_masks_check_flags_bad_file(tmp_path, capsys):
    good = tmp_path / "good.txt"
    assert main(["masks", "--d", "4", "--M", "2", "--save", str(good)]) == 0
    assert main(["masks", "--check", str(good)]) == 0
    bad = tmp_path / "bad.txt"
    bad.write_text("2 0 2 0\n0 2 0 1\n")
    assert main(["masks", "--check", str(bad)]) == 1
    assert capsys.readouterr().out.strip().endswith("sum FAIL")


def test_validation_errors_exit_one(tmp_path):
    cfg = _small_config(tmp_path)
    assert main(["synth", "--config", cfg, "--T", "0", "--out", str(tmp_path / "o")]) == 1
    assert main(["synth", "--config", cfg, "--estimators", "BOGUS", "--out", str(tmp_path / "o")]) == 1
    assert main(["synth", "--config", cfg, "--keep-ratio", "0.3", "--estimators", "RR_MASK_IID",
                 "--out", str(tmp_path / "o")]) == 1
    assert main(["rates", str(tmp_path / "nothing*.csv")]) == 1


def test_synth_is_reproducible(tmp_path):
    cfg = _small_config(tmp_path)
    for name in ("a", "b"):
        assert main(["synth", "--config", cfg, *SMALL, "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert len(files) == 10
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"]
    assert {r["estimator"] for r in ma["runs"]} == {"RR", "RR_MASK_WOR", "RR_MASK_IID", "RR_PROJ", "IID"}
    assert (tmp_path / "a" / "rates.json").read_bytes() == (tmp_path / "b" / "rates.json").read_bytes()
    assert not list((tmp_path / "a").glob("*.partial"))


def test_parallel_workers_match_serial(tmp_path):
    cfg = _small_config(tmp_path)
    assert main(["synth", "--config", cfg, *SMALL, "--out", str(tmp_path / "s")]) == 0
    assert main(["synth", "--config", cfg, *SMALL, "--workers", "2", "--out", str(tmp_path / "p")]) == 0
    for f in (tmp_path / "s").glob("*.csv"):
        assert f.read_bytes() == (tmp_path / "p" / f.name).read_bytes()


def test_divergence_exits_two_and_keeps_partial(tmp_path):
    cfg = _small_config(tmp_path, "\n[schedule]\nkind = constant\neta = 50\n")
    assert main(["synth", "--config", cfg, "--T", "5000", "--seeds", "0", "--estimators", "RR",
                 "--out", str(tmp_path / "x")]) == 2
    assert list((tmp_path / "x").glob("*.partial"))
    assert json.loads((tmp_path / "x" / "manifest.json").read_text())["runs"][0]["error"]


def test_decompose_and_rates(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    out = tmp_path / "d"
    assert main(["decompose", "--config", cfg, *SMALL, "--estimators", "RR,RR_MASK_WOR", "--out", str(out)]) == 0
    tr = RunTrace.read_csv(out / "RR_MASK_WOR__seed0.csv")
    assert tr.has_decomposition
    rr = RunTrace.read_csv(out / "RR__seed0.csv")
    assert np.all(rr["compress_sq"] == 0.0)
    rates = json.loads((out / "rates.json").read_text())
    assert any(r["column"] == "compress_sq" and r["estimator"] == "RR" and r["slope"] is None for r in rates)
    capsys.readouterr()
    assert main(["rates", str(out / "RR__seed*.csv"), "--columns", "theta_err_sq,reshuffle_sq"]) == 0
    reports = json.loads(capsys.readouterr().out)
    assert [r["column"] for r in reports] == ["theta_err_sq", "reshuffle_sq"]
    assert reports[0]["seeds"] == 2


def test_rates_on_exact_power_law(tmp_path, capsys):
    t = np.unique(np.round(np.geomspace(1, 10**6, 64))).astype(int)
    for seed in range(3):
        RunTrace(t, {"theta_err_sq": 5.0 * t.astype(float) ** -2}).write_csv(tmp_path / f"PL__seed{seed}.csv")
    assert main(["rates", str(tmp_path / "PL__seed*.csv")]) == 0
    rep = json.loads(capsys.readouterr().out)[0]
    assert rep["estimator"] == "PL" and abs(rep["slope"] + 2.0) < 1e-6 and rep["seeds"] == 3


def test_rates_rejects_mismatched_grids(tmp_path):
    t = np.arange(100, 200)
    RunTrace(t, {"theta_err_sq": 1.0 / t}).write_csv(tmp_path / "X__seed0.csv")
    RunTrace(t + 1, {"theta_err_sq": 1.0 / t}).write_csv(tmp_path / "X__seed1.csv")
    assert main(["rates", str(tmp_path / "X__*.csv")]) == 1


def test_config_hash_tracks_semantic_fields(tmp_path):
    base = load_experiment("figure2")
    same = load_experiment("figure2", overrides={"output": {"dir": str(tmp_path), "workers": "4"}})
    assert base.config_hash() == same.config_hash()
    for over in ({"run": {"T": "1000"}}, {"run": {"keep_ratio": "0.2"}}, {"dataset": {"seed": "1"}},
                 {"schedule": {"c0_lambda": "2.5"}}):
        assert load_experiment("figure2", overrides=over).config_hash() != base.config_hash()


def test_config_precedence_and_errors(tmp_path, monkeypatch):
    path = _small_config(tmp_path, "T = 500\n")
    cfg = load_experiment("figure2", path, {"run": {"T": "700"}})
    assert cfg.T == 700 and cfg.dataset.n == 40
    assert load_experiment("figure2", path).T == 500
    assert load_experiment("figure2").T == 1_000_000
    with pytest.raises(ConfigError):
        load_experiment("nope")
    monkeypatch.setenv("OMGD_OUTPUT_ROOT", str(tmp_path))
    assert load_experiment("figure2").output_dir == tmp_path / "runs" / "figure2"


def test_lemma_suite_preset(tmp_path):
    assert main(["synth", "--preset", "lemma-suite", "--T", "2000", "--seeds", "0-1", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "lemma_report.json").read_text())["checks"]
    wor = [c for c in report if c["estimator"] == "RR_MASK_WOR"]
    iid = [c for c in report if c["estimator"] == "RR_MASK_IID"]
    assert wor and all(c["cancellation_ok"] and c["lemma_ok"] for c in wor)
    assert iid and all(c["variance_bound_ok"] for c in iid)


def test_train_command(tmp_path, capsys):
    out = tmp_path / "t"
    assert main(["train", "--layers", "12", "--gamma", "3", "--period", "1", "--unit", "steps",
                 "--steps", "8", "--samples", "6", "--width", "2", "--input-dim", "2", "--out", str(out)]) == 0
    log = (out / "lisa_wor_L12_g3_K1__seed0.periods.csv").read_text().splitlines()
    assert log[0] == "period,start_step,active,reset,leftover"
    active = [set(map(int, row.split(",")[2].split())) for row in log[1:5]]
    assert set().union(*active) == set(range(12))
    assert (out / "summary.csv").exists()


def test_train_full_sampling_matches_sgd(tmp_path):
    from omgd.lisa import sgd_train
    from omgd.objectives import build_layered_model, make_layered_dataset
    from omgd.schedules import Constant

    out = tmp_path / "full"
    assert main(["train", "--layers", "3", "--gamma", "3", "--period", "2", "--unit", "steps", "--steps", "40",
                 "--samples", "8", "--width", "3", "--input-dim", "2", "--lr", "0.05", "--out", str(out)]) == 0
    tr = RunTrace.read_csv(out / "lisa_wor_L3_g3_K2__seed0.csv")
    X, y = make_layered_dataset(8, 2, seed=0)
    ref = sgd_train(build_layered_model(3, 3, seed=0, input_dim=2), X, y, 40, Constant(0.05), seed=0)
    assert tr.to_csv() == RunTrace(ref.t, dict(ref.values)).to_csv()
