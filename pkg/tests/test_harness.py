import json
import math
import re

import numpy as np
import pytest

from dpnc.cli import main
from dpnc.harness import (COLUMNS, EXPERIMENTS, ConfigError, ExperimentConfig, emit_report,
                          run_experiment, verify_results)

SMALL = {
    "spider_empirical": dict(n=512, trial_count=3),
    "spider_population": dict(n=4096, trial_count=2, enforce_sample_budget=False, T_max=200),
    "abovethreshold": dict(n=2000, trial_count=3, candidates=20),
    "em_continuous": dict(n=500, d=1, problem="double_well", epsilon=0.4, trial_count=2,
                          em_T_steps=4, em_chains=200),
    "em_packing": dict(n=200, d=1, problem="double_well", trial_count=3),
    "rate_scan": dict(n_values="256,512,1024", trial_count=2),
}


def _config(experiment, **extra):
    kw = dict(experiment=experiment, problem="cubic_saddle", d=2)
    kw.update(SMALL[experiment])
    kw.update(extra)
    return ExperimentConfig(**kw)


def _bytes(path, names=("results.csv", "summary.json", "ledgers.json", "plots.svg", "config.ini")):
    return {name: (path / name).read_bytes() for name in names}


def test_config_round_trip():
    cfg = ExperimentConfig(experiment="rate_scan", n=999, epsilon=0.3, delta=1e-7, x0="0.5,-1",
                           C_gamma=4.0, utility_logs=True, T_max=17, n_values="100,200")
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg
    bare = ExperimentConfig.from_text("experiment = abovethreshold\nn = 50\n", {"seed": "9"})
    assert bare.seed == 9 and bare.n == 50


@pytest.mark.parametrize("text", ["experiment = nope\n", "experiment = rate_scan\nwhat = 1\n",
                                  "experiment = rate_scan\nn = ten\n",
                                  "experiment = rate_scan\nd = 2\nx0 = 1,2,3\n",
                                  "experiment = rate_scan\nutility_logs = maybe\n"])
def test_bad_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


def test_zero_trials_gives_empty_table(tmp_path):
    res = run_experiment(_config("spider_empirical", trial_count=0))
    assert res.rows == []
    files = emit_report(res, tmp_path)
    assert (tmp_path / "results.csv").read_text() == ",".join(COLUMNS) + "\n"
    text = (tmp_path / "summary.json").read_text()
    assert "NaN" not in text
    assert json.loads(text)["rows"] == 0
    assert set(files) >= {"results.csv", "summary.json", "plots.svg"}


@pytest.mark.parametrize("experiment", EXPERIMENTS)
def test_rerun_is_byte_identical_and_within_budget(experiment, tmp_path):
    cfg = _config(experiment)
    a, b = tmp_path / "a", tmp_path / "b"
    res = run_experiment(cfg)
    emit_report(res, a)
    emit_report(run_experiment(cfg), b)
    assert _bytes(a) == _bytes(b)
    assert res.summary["ledger_within_target"]
    for row in res.rows:
        if math.isfinite(row["eps_spent"]):
            assert row["eps_spent"] <= cfg.epsilon
            assert row["delta_spent"] <= row["delta_target"]
    emit_report(res, a)
    assert _bytes(a) == _bytes(b)


def test_parallel_jobs_do_not_change_results():
    cfg = _config("spider_empirical", trial_count=4)
    assert run_experiment(cfg, jobs=2).to_csv() == run_experiment(cfg, jobs=1).to_csv()


def test_different_seed_changes_results():
    assert run_experiment(_config("em_packing")).to_csv() != \
        run_experiment(_config("em_packing", seed=1)).to_csv()


def test_rate_scan_shape_and_slope(tmp_path):
    res = run_experiment(_config("rate_scan"))
    assert len(res.rows) == 3 * 2
    ns = np.array([256, 512, 1024], dtype=float)
    med = np.array([np.median([r["grad_norm"] for r in res.rows if r["n"] == n]) for n in ns])
    x, y = np.log(ns), np.log(med)
    # Normal equations for y = a x + b, solved by hand.
    m = len(x)
    slope = (m * (x * y).sum() - x.sum() * y.sum()) / (m * (x * x).sum() - x.sum() ** 2)
    assert res.summary["fitted_slope"] == pytest.approx(slope, rel=1e-10)
    assert all(r["fitted_slope"] == res.summary["fitted_slope"] for r in res.rows)
    emit_report(res, tmp_path)
    svg = (tmp_path / "plots.svg").read_text()
    # Text is rendered as paths, so count artists instead: each scatter series
    # appears once in the axes and once in the legend.
    assert svg.count('<g id="PathCollection_') == 2 * 3
    assert svg.count('<g id="line2d_') >= 2


def test_em_continuous_reports_truncation_and_theory_horizon():
    res = run_experiment(_config("em_continuous"))
    for row in res.rows:
        assert row["status"] == "truncated"
        assert row["T"] == 4 and row["T_theory"] > 4
        assert math.isfinite(row["empirical_excess"])


def test_population_pipeline_statuses():
    res = run_experiment(_config("spider_population"))
    assert all(r["status"] in ("ok", "none_selected", "data_exhausted") for r in res.rows)
    strict = run_experiment(_config("spider_population", enforce_sample_budget=True))
    assert all(str(r["status"]).startswith("failed: SampleBudgetInfeasible") for r in strict.rows)
    assert strict.summary["failures"] == len(strict.rows)


# -- command line ---------------------------------------------------------------------

def test_cli_run_and_verify(tmp_path, capsys):
    cfg = tmp_path / "at.ini"
    cfg.write_text("[experiment]\nexperiment = abovethreshold\nn = 2000\ntrial_count = 3\n")
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--seed", "3", f"--out={out}", "--candidates=10"]) == 0
    printed = capsys.readouterr().out
    assert "abovethreshold: 3 rows" in printed
    assert main(["verify", str(out / "results.csv")]) == 0
    loaded = ExperimentConfig.load(out / "config.ini")
    assert loaded.seed == 3 and loaded.candidates == 10

    lines = (out / "results.csv").read_text().splitlines()
    header = lines[0].split(",")
    i = header.index("is_sosp")
    tampered = []
    for line in lines[1:]:
        cells = line.split(",")
        if cells[i] in ("true", "false"):
            cells[i] = "false" if cells[i] == "true" else "true"
        tampered.append(",".join(cells))
    (out / "results.csv").write_text("\n".join([lines[0]] + tampered) + "\n")
    assert main(["verify", str(out / "results.csv")]) == 1


def test_cli_config_errors_exit_two(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("experiment = spider_empirical\n")
    assert main(["run", str(cfg), "--bogus=1"]) == 2
    assert main(["run", str(tmp_path / "missing.ini")]) == 2


def test_verify_flags_ledger_overrun(tmp_path):
    res = run_experiment(_config("em_packing"))
    emit_report(res, tmp_path)
    text = (tmp_path / "results.csv").read_text()
    header = text.splitlines()[0].split(",")
    j = header.index("eps_spent")
    rows = [line.split(",") for line in text.splitlines()[1:]]
    rows[0][j] = "5.0"
    (tmp_path / "results.csv").write_text(
        "\n".join([",".join(header)] + [",".join(r) for r in rows]) + "\n")
    ok, problems = verify_results(tmp_path / "results.csv")
    assert not ok and re.search("ledger", problems[0])
