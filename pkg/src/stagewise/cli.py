"""Command-line entry point.

Subcommands: compare, sweep, stability, diagnose, bounds, gen-data, bench.
Each of the first six takes a JSON config path plus --seed/--out overrides;
failures exit nonzero with a machine-readable error record on stderr.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .core import RngStream
from .data_io import (gen_classification, gen_quadratic, save_problem_spec,
                      serialize_libsvm)
from .diagnostics import probe_points, probe_trajectory
from .harness import (ConfigError, ExperimentConfig, assemble_problem,
                      build_start_schedule, run_algorithm, run_compare,
                      run_scaling_sweep)
from .losses import gradient_norms
from .schedules import poly_one_over_t, poly_inv_sqrt, constant as constant_sched, Stage
from .stability import (TwinConfig, bound_sgd_stability, bound_start_stability,
                        bound_start_nonconvex_stability, check_recurrence,
                        trace_to_rows, twin_run)


def _load(path):
    return json.loads(Path(path).read_text())


def _cmd_compare(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seed:
        cfg.seeds = [int(s) for s in args.seed]
    if args.out:
        cfg.out = Path(args.out)
    per_algo = run_compare(cfg)
    for name, recs in per_algo.items():
        final = np.mean([r.entries[-1].train_error for r in recs])
        print("%-20s final train error (mean over %d seeds): %.6g"
              % (name, len(recs), final))
    print("wrote CSVs to %s" % cfg.out)


def _cmd_sweep(args):
    obj = _load(args.config)
    report = run_scaling_sweep(
        d=int(obj.get("d", 50)), n=int(obj.get("n", 2000)),
        smoothness=float(obj.get("L", 1.0)), noise=float(obj["noise"]),
        mu_values=[float(m) for m in obj["mu_values"]],
        seeds=[int(s) for s in (args.seed or obj.get("seeds", range(20)))],
        target_ratio=float(obj.get("target_ratio", 64.0)),
        data_seed=int(obj.get("data_seed", 7)),
        sgd_cap=obj.get("sgd_cap"),
        out=args.out or obj.get("out"),
        sigma2_at_ref=obj.get("sigma2_at_ref"),
    )
    print(report.table())


def _twin_config_from(obj, problem, spec):
    if spec.kind == "sgd":
        sched = {"poly_one_over_t": poly_one_over_t, "poly_inv_sqrt": poly_inv_sqrt,
                 "constant": constant_sched}[spec.schedule](spec.param)
        return TwinConfig("sgd", sched=sched, iters=int(obj["budget"]))
    if spec.kind == "start":
        sched = build_start_schedule(spec, problem)
        return TwinConfig("stages", stages=sched.stages, gamma=sched.gamma,
                          return_op=sched.return_op)
    stages = tuple(Stage(float("nan"), spec.eta0 * spec.decay**k, int(t))
                   for k, t in enumerate(spec.stage_lengths))
    gamma = spec.gamma if spec.gamma else np.inf
    return TwinConfig("stages", stages=stages, gamma=gamma,
                      return_op="average" if spec.variant == "V3" else "last")


def _cmd_stability(args):
    obj = _load(args.config)
    cfg = ExperimentConfig.from_json(obj)
    if args.seed:
        cfg.seeds = [int(s) for s in args.seed]
    problem = assemble_problem(cfg)
    spec = cfg.algorithms[0]
    twin_cfg = _twin_config_from(obj, problem, spec)
    trials = int(obj.get("trials", 20))
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    m = problem.model
    G = m.lipschitz or 0.0
    L = m.smoothness
    convex = True
    rows = ["trial,seed,swap_index,final_delta,hit_steps,violations"]
    finals = []
    for trial in range(trials):
        seed = cfg.seeds[trial % len(cfg.seeds)] * 1000 + trial
        rng = RngStream(seed)
        swap_idx = rng.draw(problem.train.n)
        donor = rng.draw(problem.train.n)
        replacement = problem.train.example(donor)
        trace = twin_run(m, problem.train, problem.feasible,
                         (swap_idx, replacement), twin_cfg, problem.w0, rng)
        viol, checked, skipped = check_recurrence(trace, L, G if G else
                                                  trace_max_gradient(problem, trace),
                                                  convex)
        finals.append(trace.final_delta)
        rows.append("%d,%d,%d,%.17g,%d,%d" % (trial, seed, swap_idx,
                                              trace.final_delta,
                                              int(trace.hits.sum()), len(viol)))
        if trial == 0:
            trace_rows = trace_to_rows(trace, L, G if G else 1.0, convex)
            lines = ["stage,t,delta,same_sample,bound_branch,bound_value,violation"]
            lines += ["%d,%d,%.17g,%d,%s,%.17g,%d" % r for r in trace_rows]
            (out / "trace_trial0.csv").write_text("\n".join(lines) + "\n")
    (out / "stability_summary.csv").write_text("\n".join(rows) + "\n")
    mean_gd = G * float(np.mean(finals)) if G else float("nan")
    print("trials=%d mean final delta=%.6g mean G*delta=%.6g"
          % (trials, float(np.mean(finals)), mean_gd))
    print("wrote %s" % (out / "stability_summary.csv"))


def trace_max_gradient(problem, trace):
    g1 = gradient_norms(problem.model, trace.final_w, problem.train)
    return float(g1.max())


def _cmd_diagnose(args):
    obj = _load(args.config)
    cfg = ExperimentConfig.from_json(obj)
    if args.seed:
        cfg.seeds = [int(s) for s in args.seed]
    problem = assemble_problem(cfg)
    spec = cfg.algorithms[0]
    snaps = []
    rec = run_algorithm(spec, problem, cfg.seeds[0], cfg.budget,
                        eval_every=max(1, cfg.budget // int(obj.get("probes", 200))),
                        on_eval=lambda cum, w: snaps.append((cum, w)))
    pts = probe_points(snaps, int(obj.get("probes", 200)))
    lanczos_every = int(obj.get("lanczos_every", 0))
    hvp_idx = set(range(0, len(pts), lanczos_every)) if lanczos_every else set()
    report = probe_trajectory(problem.model, problem.train, problem.feasible, pts,
                              problem.reference, hvp_probes=hvp_idx,
                              lanczos_iters=int(obj.get("lanczos_iters", 30)),
                              rng=RngStream(cfg.seeds[0] + 1))
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["probe_index,cumulative_iteration,theta,mu,f_gap,distance_sq"]
    for idx, cum, theta, mu, gap, dist2 in report.probes:
        lines.append("%d,%d,%.17g,%.17g,%.17g,%.17g" % (idx, cum, theta, mu, gap, dist2))
    (out / "assumptions.csv").write_text("\n".join(lines) + "\n")
    lines = ["probe_index,min_eig,iters,breakdown_flag"]
    for idx, est, iters, broke in report.rho_estimates:
        lines.append("%d,%.17g,%d,%d" % (idx, est, iters, broke))
    (out / "lanczos.csv").write_text("\n".join(lines) + "\n")
    print(json.dumps(report.summary(), indent=2))
    print("wrote %s and %s" % (out / "assumptions.csv", out / "lanczos.csv"))


def _cmd_bounds(args):
    obj = _load(args.config)
    rows = []
    if "sgd" in obj:
        p = obj["sgd"]
        for T in p.get("T_values", [p.get("T", 1000)]):
            val = bound_sgd_stability(p["L"], p["G"], p["mu"], p["n"], T,
                                      bool(p.get("convex", True)))
            rows.append(("sgd(convex=%s)" % p.get("convex", True), T, val))
    if "start" in obj:
        p = obj["start"]
        val = bound_start_stability(p["G"], p.get("gamma", float("inf")),
                                    p["etas"], p["iters"], p["n"])
        rows.append(("start", sum(p["iters"]), val))
    if "start_nonconvex" in obj:
        p = obj["start_nonconvex"]
        val = bound_start_nonconvex_stability(p["L"], p["G"], p["mu"], p["n"],
                                              p["T_k"], p.get("S_prev", 0.0),
                                              p.get("c", 1.0))
        rows.append(("start_nonconvex", p["T_k"], val))
    print("%-24s %12s %16s" % ("bound", "T", "value"))
    for name, T, val in rows:
        print("%-24s %12d %16.8g" % (name, T, val))


def _cmd_gen_data(args):
    obj = _load(args.config)
    out = Path(args.out or obj.get("out", "data"))
    out.mkdir(parents=True, exist_ok=True)
    kind = obj.get("kind", "quadratic")
    if kind == "quadratic":
        ds, prob = gen_quadratic(int(obj["d"]), int(obj["n"]), float(obj["mu"]),
                                 float(obj["L"]), float(obj["noise"]),
                                 int(obj.get("seed", 0)))
        stem = obj.get("name", "quadratic")
        (out / (stem + ".libsvm")).write_text(serialize_libsvm(ds))
        save_problem_spec(out / (stem + ".json"), int(obj["d"]), int(obj["n"]),
                          float(obj["mu"]), float(obj["L"]), float(obj["noise"]),
                          int(obj.get("seed", 0)))
    elif kind == "classification":
        ds = gen_classification(int(obj["d"]), int(obj["n"]), int(obj.get("nnz", 20)),
                                int(obj.get("seed", 0)),
                                margin=float(obj.get("margin", 0.3)),
                                flip=float(obj.get("flip", 0.02)),
                                zipf=float(obj.get("zipf", 0.0)))
        stem = obj.get("name", "classification")
        (out / (stem + ".libsvm")).write_text(serialize_libsvm(ds))
    else:
        raise ConfigError("kind", "must be quadratic|classification")
    print("wrote dataset under %s" % out)


_BENCH_SNIPPET = """\
import json, time
import numpy as np
from stagewise import _kernels as K
from stagewise.core import RngStream
from stagewise.geometry import unconstrained
from stagewise.losses import make_quadratic_synthetic
from stagewise.optim import sgd_run
from stagewise.schedules import poly_one_over_t

steps = %d
model, ds = make_quadratic_synthetic(32, 256, 0.01, 1.0, 1e-2, seed=3)
w0 = np.zeros(32)
K.warmup()
t0 = time.perf_counter()
rec = sgd_run(model, ds, unconstrained(), poly_one_over_t(1.0), w0, steps, RngStream(1))
dt = time.perf_counter() - t0
print(json.dumps({"backend": "numba" if K.USING_NUMBA else "numpy",
                  "steps": steps, "wall": dt,
                  "checksum": float(np.sum(rec.final_w))}))
"""


def _cmd_bench(args):
    """Time the same hot loop on the compiled and pure-numpy backends."""
    import subprocess

    steps = int(args.steps)
    # the fallback is orders of magnitude slower; give it a smaller workload
    plans = [("numba", steps), ("numpy", max(1000, steps // 100))]
    results = []
    for backend, n in plans:
        env = dict(os.environ, STAGEWISE_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", _BENCH_SNIPPET % n], env=env,
                             capture_output=True, text=True, timeout=900)
        if out.returncode != 0:
            print("backend=%s failed:\n%s" % (backend, out.stderr.strip()))
            continue
        results.append(json.loads(out.stdout.strip().split("\n")[-1]))
    for r in results:
        print("backend=%-5s steps=%-8d wall=%8.3fs  %10.0f ns/step"
              % (r["backend"], r["steps"], r["wall"], 1e9 * r["wall"] / r["steps"]))
    if len(results) == 2:
        per_step = [1e9 * r["wall"] / r["steps"] for r in results]
        print("compiled speedup: %.0fx per step" % (per_step[1] / per_step[0]))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="stagewise")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_cfg in (
        ("compare", _cmd_compare, True), ("sweep", _cmd_sweep, True),
        ("stability", _cmd_stability, True), ("diagnose", _cmd_diagnose, True),
        ("bounds", _cmd_bounds, True), ("gen-data", _cmd_gen_data, True),
    ):
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON config path")
        p.add_argument("--seed", action="append", help="seed override (repeatable)")
        p.add_argument("--out", help="output directory override")
        p.set_defaults(func=fn)
    p = sub.add_parser("bench")
    p.add_argument("--steps", default=200_000)
    p.set_defaults(func=_cmd_bench)

    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:
        record = {"error": type(exc).__name__, "message": str(exc),
                  "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
