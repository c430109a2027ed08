import json

import numpy as np
import pandas as pd
import pytest
import yaml

from constrained_defer.cli import main
from constrained_defer.embeddings import ConstraintSpec, build_embeddings
from constrained_defer.pipeline import (
    RunConfig, StudyConfig, evaluate_policy, generalization_margin, prepare, run_generalization_study,
    run_solve, run_sweep,
)

SMALL = {"n_train": 1500, "n_val": 3000, "n_test": 3000}


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("CDEFER_OUTPUT_ROOT", str(tmp_path / "runs"))
    return tmp_path / "runs"


def write_config(path, **kw):
    base = {"scenario": dict(SMALL), "scores": {"source": "truth"},
            "evaluation": {"bootstrap": 5}}
    base.update(kw)
    path.write_text(yaml.safe_dump(base))
    return path


def test_config_invariants():
    with pytest.raises(ValueError, match="exactly one"):
        RunConfig(constraints=[{"kind": "dp", "delta": 0.1}])
    with pytest.raises(ValueError, match="at least one constraint"):
        RunConfig(scenario=SMALL)
    with pytest.raises(ValueError, match="conflicts"):
        RunConfig(scenario=SMALL, unconstrained=True, constraints=[{"kind": "dp", "delta": 0.1}])
    with pytest.raises(ValueError, match="path"):
        RunConfig(scenario=SMALL, scores={"source": "ingest"}, unconstrained=True)
    a = RunConfig(scenario=SMALL, unconstrained=True)
    b = RunConfig.from_dict(json.loads(json.dumps(a.to_dict())))
    assert a.digest() == b.digest()


def test_unconstrained_run(output_root):
    cfg = RunConfig(scenario=SMALL, scores={"source": "truth"}, unconstrained=True,
                    output_dir="u", evaluation={"bootstrap": 0})
    res = run_solve(cfg)
    assert res["policy"].predictor.k == ()
    prep = prepare(cfg)
    _, s = prep.split("val")
    want = np.maximum(s.p_y.max(axis=1), s.p_agree).mean()
    assert res["report"].objective == pytest.approx(want, abs=1e-12)
    for name in ("policy.json", "report_tuning.json", "manifest.json", "config.json"):
        assert (output_root / "u" / name).exists()
    manifest = json.loads((output_root / "u" / "manifest.json").read_text())
    assert manifest["config_sha256"] == cfg.digest()


def test_solve_and_evaluate_cli(tmp_path, output_root, capsys):
    cfg = write_config(tmp_path / "c.yaml", constraints=[{"kind": "dp", "delta": 0.05}],
                       output_dir="dp")
    assert main(["solve", "--config", str(cfg), "--seed", "1"]) == 0
    policy = output_root / "dp" / "policy.json"
    capsys.readouterr()
    assert main(["evaluate", "--config", str(cfg), "--policy", str(policy), "--seed", "1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    slack = generalization_margin(SMALL["n_test"])
    assert abs(rep["constraint_values"]["dp"]) <= 0.05 + slack


def test_missing_column_exit_code(tmp_path, capsys):
    assert main(["simulate", "--out", "sim", "--n-train", "50", "--n-val", "50",
                 "--n-test", "50"]) == 0
    sim = tmp_path / "runs" / "sim"
    scores = pd.read_csv(sim / "scores_truth.csv").drop(columns=["p_m1"])
    scores.to_csv(tmp_path / "s.csv", index=False)
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"data": str(sim / "data.csv"),
                                   "scores": {"source": "ingest", "path": str(tmp_path / "s.csv")},
                                   "constraints": [{"kind": "dp", "delta": 0.05}]}))
    assert main(["solve", "--config", str(cfg)]) == 2
    assert "p_m1" in capsys.readouterr().err


def test_infeasible_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", constraints=[{"kind": "budget", "delta": -0.1}])
    assert main(["solve", "--config", str(cfg)]) == 3
    assert "minimum achievable" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"scenario": SMALL}))
    assert main(["solve", "--config", str(cfg)]) == 2
    assert main(["solve", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_sweep(tmp_path, output_root):
    cfg = RunConfig(scenario=SMALL, scores={"source": "truth"},
                    constraints=[{"kind": "dp", "delta": 0.1}], evaluation={"bootstrap": 5})
    deltas = [0.0, 0.05, 0.1, 0.2, 1.0]
    df = run_sweep(cfg, deltas, out_dir="s1")
    run_sweep(cfg, deltas, out_dir="s2")
    assert (output_root / "s1" / "sweep.csv").read_bytes() == (output_root / "s2" / "sweep.csv").read_bytes()
    assert (df["status"] == "ok").all()
    obj = df["tuning_objective"].astype(float).to_numpy()
    assert np.all(np.diff(obj) >= -1e-6)
    free = run_solve(RunConfig(scenario=SMALL, scores={"source": "truth"}, unconstrained=True,
                               output_dir="free", evaluation={"bootstrap": 0}))
    assert obj[-1] == pytest.approx(free["report"].objective, abs=1e-12)
    assert df["k"].iloc[-1] == "0" and float(df["p"].iloc[-1]) == 0.0


def test_sweep_records_infeasible_rows():
    cfg = RunConfig(scenario=SMALL, scores={"source": "truth"},
                    constraints=[{"kind": "budget", "delta": 0.1}], evaluation={"bootstrap": 0})
    df = run_sweep(cfg, [-0.5, 0.1])
    assert list(df["status"]) == ["not_feasible", "ok"]


def test_evaluation_matches_plugin_on_truth_scores():
    cfg = RunConfig(scenario={"n_train": 10, "n_val": 20_000, "n_test": 20_000},
                    scores={"source": "truth"}, constraints=[{"kind": "dp", "delta": 0.05}])
    prep = prepare(cfg)
    dv, sv = prep.split("val")
    dt, st_ = prep.split("test")
    from constrained_defer.solver import solve
    specs = [ConstraintSpec("dp", 0.05)]
    policy = solve(build_embeddings(sv, specs))
    rep = evaluate_policy(policy, dt, st_, specs, 0)
    assert rep.constraint_values["dp"] == pytest.approx(rep.extra["plugin:dp"], abs=0.02)


def test_margin_ratio():
    for n in (1_000, 10_000):
        ratio = generalization_margin(n) / generalization_margin(10 * n)
        ref = np.sqrt(np.log(n) / n) / np.sqrt(np.log(10 * n) / (10 * n))
        assert 0.5 <= ratio / ref <= 2.0


def test_small_generalization_study(output_root):
    study = StudyConfig(n_grid=(500, 2000), seeds=3, n_test=20_000)
    df = run_generalization_study(study, out_dir="g")
    assert len(df) == 6
    assert (output_root / "g" / "gen_study_summary.csv").exists()
    again = run_generalization_study(study)
    pd.testing.assert_frame_equal(df, again)


def test_oracle_check_cli(capsys):
    assert main(["oracle-check", "--quick", "--structural-only"]) == 0
    out = capsys.readouterr().out
    assert "stated-table mismatches not counted" in out
    # by default every mismatch counts
    assert main(["oracle-check", "--quick"]) == 1


def test_fit_scores_cli(output_root):
    assert main(["simulate", "--out", "sim", "--n-train", "300", "--n-val", "100",
                 "--n-test", "100", "--seed", "2"]) == 0
    assert main(["fit-scores", "--data", str(output_root / "sim" / "data.csv"),
                 "--out", str(output_root / "fit.csv"), "--basis", "linear"]) == 0
    df = pd.read_csv(output_root / "fit.csv")
    assert len(df) == 500 and "p_m1" in df.columns
