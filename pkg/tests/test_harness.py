import json
from pathlib import Path

import numpy as np
import pytest

from stagewise.cli import main as cli_main
from stagewise.harness import (AlgorithmSpec, ConfigError, ExperimentConfig,
                               Problem, assemble_problem, build_start_schedule,
                               run_algorithm, run_compare, run_scaling_sweep,
                               run_stage_by_validation, validation_metric)
from stagewise.core import dataset_from_examples, sparse_example
from stagewise.data_io import SplitSpec, gen_classification, serialize_libsvm, split
from stagewise.losses import fit_constants, logistic, squared_hinge
from stagewise.geometry import l1_ball


def synthetic_config(out, budget=40, eval_every=10, algos=None):
    return {
        "dataset": {"kind": "synthetic_quadratic", "d": 6, "n": 30, "mu": 0.05,
                    "L": 1.0, "noise": 0.01, "seed": 3},
        "loss": {"kind": "square"},
        "feasible": {"kind": "unconstrained"},
        "algorithms": algos or [
            {"name": "sgd1t", "kind": "sgd", "schedule": "poly_one_over_t", "param": 0.05},
        ],
        "seeds": [1, 2],
        "budget": budget,
        "eval_every": eval_every,
        "out": str(out),
    }


def test_config_validation_reports_field():
    bad = {"dataset": {"kind": "synthetic_quadratic", "d": 4, "n": 10, "mu": 0.1,
                       "L": 1.0, "noise": 0.0},
           "loss": {"kind": "square"}, "algorithms": [], "seeds": [1], "budget": 5}
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_json(bad)
    assert "dataset.seed" in str(err.value)
    bad["dataset"]["seed"] = 1
    with pytest.raises(ConfigError, match="algorithms"):
        ExperimentConfig.from_json(bad)
    bad["algorithms"] = [{"name": "x", "kind": "sgd", "schedule": "poly_one_over_t"}]
    with pytest.raises(ConfigError, match=r"algorithms\[0\].param"):
        ExperimentConfig.from_json(bad)


def test_config_mu_must_not_exceed_L():
    cfg = synthetic_config("o")
    cfg["dataset"]["mu"] = 2.0
    with pytest.raises(ConfigError, match="dataset.mu"):
        ExperimentConfig.from_json(cfg)


def test_run_compare_row_count_and_determinism(tmp_path):
    cfg = ExperimentConfig.from_json(synthetic_config(tmp_path / "r", budget=10,
                                                      eval_every=2))
    run_compare(cfg)
    body = (tmp_path / "r" / "sgd1t_seed1.csv").read_text()
    rows = body.strip().split("\n")
    assert rows[0].startswith("cumulative_iteration,stage,step_size,train_error")
    assert len(rows) - 1 == 10 // 2 + 1
    # byte-identical on re-run
    run_compare(cfg)
    assert (tmp_path / "r" / "sgd1t_seed1.csv").read_text() == body
    assert (tmp_path / "r" / "plot_curves.py").exists()


def test_identical_algorithm_entries_match(tmp_path):
    algos = [
        {"name": "a", "kind": "sgd", "schedule": "constant", "param": 0.2},
        {"name": "b", "kind": "sgd", "schedule": "constant", "param": 0.2},
    ]
    cfg = ExperimentConfig.from_json(synthetic_config(tmp_path / "r", algos=algos))
    run_compare(cfg)
    a = (tmp_path / "r" / "a_seed1.csv").read_text()
    b = (tmp_path / "r" / "b_seed1.csv").read_text()
    assert a == b


def test_aggregate_means_match_per_seed_files(tmp_path):
    cfg = ExperimentConfig.from_json(synthetic_config(tmp_path / "r", budget=20,
                                                      eval_every=5))
    run_compare(cfg)
    per_seed = []
    for seed in (1, 2):
        rows = (tmp_path / "r" / ("sgd1t_seed%d.csv" % seed)).read_text().strip().split("\n")[1:]
        per_seed.append({int(r.split(",")[0]): float(r.split(",")[3]) for r in rows})
    agg_rows = (tmp_path / "r" / "aggregate.csv").read_text().strip().split("\n")[1:]
    for row in agg_rows:
        parts = row.split(",")
        cum, mean = int(parts[1]), float(parts[2])
        assert mean == pytest.approx(np.mean([p[cum] for p in per_seed]), rel=1e-15)


def _libsvm_problem(tmp_path, budget=600):
    ds = gen_classification(30, 200, 6, seed=5, margin=0.4, flip=0.02)
    path = tmp_path / "data.libsvm"
    path.write_text(serialize_libsvm(ds))
    return {
        "dataset": {"kind": "libsvm", "path": str(path)},
        "loss": {"kind": "squared_hinge"},
        "feasible": {"kind": "l1_ball", "radius": 15.0},
        "split": {"test_fraction": 0.25, "validation_fraction": 0.25, "seed": 2},
        "algorithms": [
            {"name": "stagewise", "kind": "stage_validation", "eta0": 0.3,
             "decay": 0.5, "window": 100, "threshold": 0.01},
        ],
        "seeds": [1],
        "budget": budget,
        "eval_every": 100,
        "out": str(tmp_path / "out"),
        "reference_budget": 2000,
    }


def test_gen_gap_column_consistency(tmp_path):
    cfg = ExperimentConfig.from_json(_libsvm_problem(tmp_path))
    run_compare(cfg)
    rows = (tmp_path / "out" / "stagewise_seed1.csv").read_text().strip().split("\n")[1:]
    assert rows
    for row in rows:
        parts = row.split(",")
        train, test, gap = float(parts[3]), float(parts[4]), float(parts[5])
        assert gap == test - train


def test_stage_validation_constant_metric_ends_stage_at_window(tmp_path):
    # a dataset whose labels are all +1: predictions from w0=0 classify
    # everything the same way forever at eta ~ 0, so the metric is constant
    ds = dataset_from_examples([sparse_example(1.0, [(0, 1.0)]) for _ in range(40)],
                               dim=1)
    train, val, test = split(ds, SplitSpec(0.25, 0.25, split_seed=0))
    m = fit_constants(squared_hinge(), train, None)
    problem = Problem(m, train, val, test, l1_ball(1e-9), 0.0, np.zeros(1), 0.0,
                      np.zeros(1))
    spec = AlgorithmSpec(name="sv", kind="stage_validation", eta0=1e-12, decay=0.5,
                         window=25, threshold=0.01, return_op="last")
    rec = run_stage_by_validation(problem, spec, seed=0, budget=100)
    stage_of = {p.cum_t: p.stage for p in rec.entries}
    # every stage ends after exactly one window
    assert stage_of[25] == 1 and stage_of[50] == 2 and stage_of[75] == 3


def test_stage_validation_zero_threshold_never_terminates_early(tmp_path):
    cfg_json = _libsvm_problem(tmp_path)
    cfg_json["algorithms"][0]["threshold"] = 0.0
    cfg = ExperimentConfig.from_json(cfg_json)
    problem = assemble_problem(cfg)
    rec = run_algorithm(cfg.algorithms[0], problem, 1, cfg.budget)
    assert all(p.stage == 1 for p in rec.entries)


def test_validation_metric_classification_and_rmse():
    ds = dataset_from_examples([sparse_example(1.0, [(0, 1.0)]),
                                sparse_example(-1.0, [(0, 1.0)])], dim=1)
    m = logistic()
    assert validation_metric(m, np.array([2.0]), ds) == 0.5
    from stagewise.losses import square as square_loss
    got = validation_metric(square_loss(), np.array([0.0]), ds)
    assert got == pytest.approx(1.0)


def test_build_start_schedule_uses_problem_mu(tmp_path):
    cfg = ExperimentConfig.from_json(synthetic_config(
        tmp_path / "r",
        algos=[{"name": "st", "kind": "start", "regime": "convex", "target_ratio": 8}]))
    problem = assemble_problem(cfg)
    sched = build_start_schedule(cfg.algorithms[0], problem)
    assert sched.mu == 0.05
    assert sched.n_stages == 3


def test_quasi_convex_requires_bounded_set(tmp_path):
    cfg = ExperimentConfig.from_json(synthetic_config(
        tmp_path / "r",
        algos=[{"name": "st", "kind": "start", "regime": "quasi_convex"}]))
    problem = assemble_problem(cfg)
    with pytest.raises(ConfigError, match="Lipschitz"):
        build_start_schedule(cfg.algorithms[0], problem)


def test_sweep_precondition():
    with pytest.raises(ValueError, match="mu values"):
        run_scaling_sweep(4, 8, 1.0, 0.0, [0.1, 0.05], seeds=[0])


def test_cli_compare_and_errors(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(synthetic_config(tmp_path / "cli_out")))
    assert cli_main(["compare", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "final train error" in out
    assert (tmp_path / "cli_out" / "aggregate.csv").exists()

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": {"kind": "libsvm"}}))
    assert cli_main(["compare", str(bad)]) == 1
    err = capsys.readouterr().err
    record = json.loads(err.strip().split("\n")[-1])
    assert record["error"] == "ConfigError"


def test_emitted_plot_script_runs(tmp_path):
    pytest.importorskip("matplotlib")
    import subprocess
    import sys
    cfg = ExperimentConfig.from_json(synthetic_config(tmp_path / "r", budget=20,
                                                      eval_every=5))
    run_compare(cfg)
    out = subprocess.run([sys.executable, "plot_curves.py", "aggregate.csv"],
                         cwd=tmp_path / "r", capture_output=True, text=True,
                         timeout=300)
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "r" / "curves.png").exists()


def test_cli_sweep_smoke(tmp_path, capsys):
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps({
        "d": 8, "n": 60, "L": 1.0, "noise": 0.01,
        "mu_values": [0.1, 0.01, 0.001], "seeds": [0, 1], "target_ratio": 8,
        "data_seed": 3, "sgd_cap": 30000,
    }))
    assert cli_main(["sweep", str(cfg), "--out", str(tmp_path / "sw")]) == 0
    out = capsys.readouterr().out
    assert "slope log(iters) vs log(1/mu)" in out
    body = (tmp_path / "sw" / "sweep.csv").read_text()
    assert body.startswith("algorithm,mu,median_iterations,unreached")


def test_cli_bench_smoke(capsys):
    assert cli_main(["bench", "--steps", "2000"]) == 0
    out = capsys.readouterr().out
    assert "backend=" in out and "ns/step" in out


def test_cli_bounds_table(tmp_path, capsys):
    cfg = tmp_path / "b.json"
    cfg.write_text(json.dumps({
        "sgd": {"L": 1.0, "G": 1.0, "mu": 0.1, "n": 100, "T_values": [9, 99]},
        "start": {"G": 1.0, "gamma": 1e30, "etas": [0.1], "iters": [100], "n": 10},
    }))
    assert cli_main(["bounds", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "0.56051" in out


def test_cli_gen_data_roundtrip(tmp_path, capsys):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"kind": "quadratic", "d": 5, "n": 20, "mu": 0.1,
                               "L": 1.0, "noise": 0.01, "seed": 4, "name": "toy"}))
    assert cli_main(["gen-data", str(cfg), "--out", str(tmp_path / "data")]) == 0
    assert (tmp_path / "data" / "toy.libsvm").exists()
    assert (tmp_path / "data" / "toy.json").exists()


def test_cli_stability_and_diagnose(tmp_path, capsys):
    cfg_obj = _libsvm_problem(tmp_path, budget=300)
    cfg_obj["loss"] = {"kind": "logistic"}
    cfg_obj["feasible"] = {"kind": "unconstrained"}
    cfg_obj["algorithms"] = [{"name": "sgd", "kind": "sgd",
                              "schedule": "constant", "param": 0.2}]
    cfg_obj["trials"] = 3
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps(cfg_obj))
    assert cli_main(["stability", str(cfg)]) == 0
    out_dir = Path(cfg_obj["out"])
    assert (out_dir / "stability_summary.csv").exists()
    trace = (out_dir / "trace_trial0.csv").read_text().strip().split("\n")
    assert trace[0] == "stage,t,delta,same_sample,bound_branch,bound_value,violation"
    assert len(trace) == 301

    cfg_obj["probes"] = 20
    cfg_obj["lanczos_every"] = 10
    cfg_obj["lanczos_iters"] = 5
    cfg2 = tmp_path / "d.json"
    cfg2.write_text(json.dumps(cfg_obj))
    assert cli_main(["diagnose", str(cfg2)]) == 0
    assert (out_dir / "assumptions.csv").exists()
    lan = (out_dir / "lanczos.csv").read_text().strip().split("\n")
    assert lan[0] == "probe_index,min_eig,iters,breakdown_flag"
    assert len(lan) >= 2
