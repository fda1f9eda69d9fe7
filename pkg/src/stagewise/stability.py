"""Uniform-stability probes and analytic stability bounds.

Twin trajectories run on a dataset and its neighbor (one example swapped)
in lock-step, sharing the index stream; the per-iteration parameter distance
delta_t realizes the quantity the stability analysis tracks. Each recorded
step can be checked against the per-step recurrences (convex and smooth
non-convex branches), and the closed-form stability bounds are exposed as
plain calculators.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .losses import empirical_risk
from .optim import DivergenceError


@dataclass(frozen=True)
class StageTraceMeta:
    stage: int
    start: int          # offset of this stage's steps in the trace arrays
    length: int
    delta1: float       # twin distance at the stage start
    eta: float = None   # constant step, or None when scheduled
    gamma: float = np.inf
    sched_kind: int = -1
    sched_param: float = 0.0
    t_start: int = 1    # global t of the stage's first step (for schedules)

    def etas(self):
        if self.eta is not None:
            return np.full(self.length, self.eta)
        ts = np.arange(self.t_start, self.t_start + self.length, dtype=np.float64)
        if self.sched_kind == 0:
            return (2.0 * ts + 1.0) / (2.0 * self.sched_param * (ts + 1.0) ** 2)
        if self.sched_kind == 1:
            return self.sched_param / np.sqrt(ts)
        return np.full(self.length, self.sched_param)


@dataclass
class StabilityTrace:
    swap_index: int
    deltas: np.ndarray          # ||w_t - w'_t|| after each coupled step
    hits: np.ndarray            # 1 when the drawn index equals swap_index
    stage_meta: list
    final_delta: float = 0.0
    final_w: np.ndarray = None
    final_w_twin: np.ndarray = None

    @property
    def same_sample_flags(self):
        return self.hits == 0

    @property
    def n_steps(self):
        return int(self.deltas.shape[0])


@dataclass(frozen=True)
class Violation:
    stage: int
    t: int
    lhs: float
    rhs: float


@dataclass(frozen=True)
class TwinConfig:
    """What the coupled pair runs: plain SGD or anchored stages."""

    kind: str                   # "sgd" or "stages"
    sched: object = None        # StepSchedule for kind="sgd"
    iters: int = 0
    stages: tuple = ()          # Stage(...) entries for kind="stages"
    gamma: float = np.inf
    return_op: str = "last"

    def __post_init__(self):
        if self.kind not in ("sgd", "stages"):
            raise ValueError("twin config kind must be 'sgd' or 'stages'")
        if self.kind == "sgd" and (self.sched is None or self.iters < 1):
            raise ValueError("sgd twin needs a schedule and iters >= 1")
        if self.kind == "stages" and not self.stages:
            raise ValueError("stages twin needs at least one stage")


def _twin_chunk(runner_args, w1, w2, anchor1, anchor2, avg1, avg2, seed, counter0,
                nsteps, t_start, sched_kind, sched_p, gamma, track_avg, deltas, hits,
                stage):
    (feasible, swap_pos, indptr, cols, vals, labels, s_cols, s_vals, s_label,
     code, hdelta, qe, qh, qw) = runner_args
    status, done = K.twin_loop(
        w1, w2, anchor1, anchor2, avg1, avg2, seed, counter0, nsteps, t_start,
        sched_kind, sched_p, gamma, feasible.code, feasible.radius, swap_pos,
        indptr, cols, vals, labels, s_cols, s_vals, s_label, code, hdelta,
        qe, qh, qw, track_avg, deltas, hits,
    )
    if status != K.OK:
        raise DivergenceError(stage, t_start + done)
    if not (np.all(np.isfinite(w1)) and np.all(np.isfinite(w2))):
        raise DivergenceError(stage, t_start + nsteps - 1)


def twin_run(m, ds, feasible, swap, cfg, w0, rng):
    """Coupled run on S and S' = make_neighbor(S, *swap) sharing one stream.

    swap = (index, replacement example). Both twins start from w0 and draw the
    identical index sequence; delta_t and the same/differing-sample flag are
    recorded every step.
    """
    swap_index, replacement = swap
    if not 0 <= swap_index < ds.n:
        raise ValueError("swap index %d out of range for n=%d" % (swap_index, ds.n))
    if replacement.nnz and int(replacement.indices[-1]) >= ds.dim:
        raise ValueError("replacement does not respect dimension %d" % ds.dim)
    w1 = np.array(w0, dtype=np.float64, copy=True)
    w2 = w1.copy()
    indptr, cols, vals, labels = ds.arrays()
    qe, qh, qw = m.quad_arrays()
    args = (feasible, swap_index, indptr, cols, vals, labels,
            replacement.indices, replacement.values, float(replacement.label),
            m.code, m.huber_delta, qe, qh, qw)

    if cfg.kind == "sgd":
        total = cfg.iters
        deltas = np.empty(total)
        hits = np.empty(total, dtype=np.int64)
        meta = [StageTraceMeta(1, 0, total, 0.0, eta=None, gamma=np.inf,
                               sched_kind=cfg.sched.code, sched_param=cfg.sched.param)]
        if cfg.sched.kind == "piecewise_constant":
            raise ValueError("run piecewise twins as kind='stages'")
        _twin_chunk(args, w1, w2, w1.copy(), w2.copy(), np.zeros_like(w1),
                    np.zeros_like(w1), rng.seed, rng.counter, total, 1,
                    cfg.sched.code, cfg.sched.param, np.inf, False, deltas, hits, 1)
        rng.skip(total)
        out1, out2 = w1, w2
    else:
        total = sum(s.iters for s in cfg.stages)
        deltas = np.empty(total)
        hits = np.empty(total, dtype=np.int64)
        meta = []
        off = 0
        for k, st in enumerate(cfg.stages, start=1):
            anchor1, anchor2 = w1.copy(), w2.copy()
            avg1, avg2 = np.zeros_like(w1), np.zeros_like(w1)
            delta1 = float(np.linalg.norm(w1 - w2))
            meta.append(StageTraceMeta(k, off, st.iters, delta1, eta=st.eta,
                                       gamma=cfg.gamma, t_start=off + 1))
            counter_base = rng.counter
            track_avg = cfg.return_op == "average"
            _twin_chunk(args, w1, w2, anchor1, anchor2, avg1, avg2, rng.seed,
                        counter_base, st.iters, off + 1, 2, st.eta, cfg.gamma,
                        track_avg, deltas[off:off + st.iters],
                        hits[off:off + st.iters], k)
            rng.skip(st.iters)
            if cfg.return_op == "average":
                w1, w2 = avg1, avg2
            elif cfg.return_op == "random_iterate":
                # one shared tau, drawn after the stage's T_k index draws
                tau = rng.draw(st.iters) + 1
                r1, r2 = anchor1.copy(), anchor2.copy()
                if tau > 1:
                    d_scr = np.empty(tau - 1)
                    h_scr = np.empty(tau - 1, dtype=np.int64)
                    _twin_chunk(args, r1, r2, anchor1, anchor2, np.zeros_like(w1),
                                np.zeros_like(w1), rng.seed, counter_base,
                                tau - 1, off + 1, 2, st.eta, cfg.gamma,
                                False, d_scr, h_scr, k)
                w1, w2 = r1, r2
            off += st.iters
        out1, out2 = w1, w2

    return StabilityTrace(
        swap_index=swap_index,
        deltas=deltas,
        hits=hits,
        stage_meta=meta,
        final_delta=float(np.linalg.norm(out1 - out2)),
        final_w=out1,
        final_w_twin=out2,
    )


def recurrence_bound(delta_t, delta1, eta, gamma, G, differing, convex, L):
    """Right-hand side of the per-step recurrence for one step.

    Convex same-sample (needs eta <= 2/L):
        eta/(eta+gamma) delta_1 + gamma/(eta+gamma) delta_t
    Smooth non-convex same-sample:
        eta/(eta+gamma) delta_1 + gamma(1+eta L)/(eta+gamma) delta_t
    Differing sample (either case): convex same-sample form + 2 eta gamma G/(eta+gamma).
    gamma = inf takes the limits (coefficients 0, 1, 2 eta G).
    """
    if math.isinf(gamma):
        a, b, c = 0.0, 1.0, 2.0 * eta * G
        growth = 1.0 + eta * L
    else:
        a = eta / (eta + gamma)
        b = gamma / (eta + gamma)
        c = 2.0 * eta * gamma * G / (eta + gamma)
        growth = (1.0 + eta * L)
    if differing:
        return a * delta1 + b * delta_t + c
    if convex:
        return a * delta1 + b * delta_t
    return a * delta1 + b * growth * delta_t


def check_stage_recurrence(deltas, hits, delta1, etas, gamma, L, G, convex,
                           slack=1e-9, stage=1, t_offset=0):
    """Evaluate the applicable recurrence branch at every recorded step.

    Returns (violations, n_checked, n_skipped). In convex mode, steps whose
    eta exceeds 2/L are skipped (the 1-expansiveness precondition fails there)
    and counted in n_skipped.
    """
    deltas = np.asarray(deltas, float)
    hits = np.asarray(hits).astype(bool)
    etas = np.broadcast_to(np.asarray(etas, float), deltas.shape)
    prev = np.concatenate(([delta1], deltas[:-1]))
    if math.isinf(gamma):
        a = np.zeros_like(etas)
        b = np.ones_like(etas)
        c = 2.0 * etas * G
    else:
        a = etas / (etas + gamma)
        b = gamma / (etas + gamma)
        c = 2.0 * etas * gamma * G / (etas + gamma)
    growth = np.where(hits | convex, 1.0, 1.0 + etas * L)
    rhs = a * delta1 + b * growth * prev + np.where(hits, c, 0.0)
    skip = convex & ~hits & (etas > 2.0 / L + 1e-15)
    bad = (deltas > rhs + slack) & ~skip
    violations = [Violation(stage, t_offset + int(t) + 1, float(deltas[t]), float(rhs[t]))
                  for t in np.flatnonzero(bad)]
    return violations, int((~skip).sum()), int(skip.sum())


def check_recurrence(trace, L, G, convex, slack=1e-9):
    """Per-step recurrence audit over a whole StabilityTrace."""
    all_v = []
    checked = skipped = 0
    for meta in trace.stage_meta:
        sl = slice(meta.start, meta.start + meta.length)
        v, c, s = check_stage_recurrence(
            trace.deltas[sl], trace.hits[sl], meta.delta1, meta.etas(),
            meta.gamma, L, G, convex, slack, meta.stage, meta.start)
        all_v.extend(v)
        checked += c
        skipped += s
    return all_v, checked, skipped


def bound_sgd_stability(L, G, mu, n, T, convex):
    """Closed-form uniform-stability ceiling for SGD with the 1/t schedule.

    convex:      (L + 2 G^2 log(T+1)) / (n mu), requires n > L/mu
    non-convex:  (1 + mu/L)/(n-1) * (2G^2/mu)^(1/(L/mu+1)) * T^((L/mu)/(L/mu+1))
    """
    if min(L, G, mu) <= 0 or n < 1 or T < 0:
        raise ValueError("parameters must be positive (T >= 0)")
    if convex:
        if n <= L / mu:
            raise ValueError("convex bound requires n > L/mu (got n=%g, L/mu=%g)" % (n, L / mu))
        return (L + 2.0 * G * G * math.log(T + 1.0)) / (n * mu)
    kappa = L / mu
    return (1.0 + mu / L) / (n - 1.0) * (2.0 * G * G / mu) ** (1.0 / (kappa + 1.0)) \
        * T ** (kappa / (kappa + 1.0))


def bound_start_stability(G, gamma, etas, iters, n):
    """Stagewise stability ceiling.

    gamma < inf: (2 gamma G^2 / n) sum_k (1 - (gamma/(eta_k+gamma))^{T_k})
    gamma = inf: (2 G^2 / n) sum_k eta_k T_k
    """
    etas = list(etas)
    iters = list(iters)
    if len(etas) != len(iters):
        raise ValueError("eta and iteration lists must have equal length")
    if math.isinf(gamma):
        return 2.0 * G * G * sum(e * t for e, t in zip(etas, iters)) / n
    total = 0.0
    for e, t in zip(etas, iters):
        total += 1.0 - (gamma / (e + gamma)) ** t
    return 2.0 * gamma * G * G * total / n


def bound_start_nonconvex_stability(L, G, mu, n, T_k, S_prev, c):
    """Last-stage non-convex ceiling:
    S_prev/n + (1 + mu/(L c))/(n-1) (2 G^2 c/mu)^(1/(1+Lc/mu)) T_k^((Lc/mu)/(Lc/mu+1))."""
    if min(L, G, mu, c) <= 0 or n < 2:
        raise ValueError("parameters must be positive with n >= 2")
    kc = L * c / mu
    return S_prev / n + (1.0 + mu / (L * c)) / (n - 1.0) \
        * (2.0 * G * G * c / mu) ** (1.0 / (1.0 + kc)) * T_k ** (kc / (kc + 1.0))


def loss_gap_estimate(m, trace, probe_ds, extra_examples=()):
    """Approximate sup_z |f(w, z) - f(w', z)| over the probe set.

    The true supremum runs over the whole example space; this takes the max
    over a held-out probe set plus any extra examples (e.g. the swapped
    pair), so it under-estimates.
    """
    from .losses import loss_value

    w, w2 = trace.final_w, trace.final_w_twin
    worst = 0.0
    for i in range(probe_ds.n):
        z = probe_ds.example(i)
        worst = max(worst, abs(loss_value(m, w, z) - loss_value(m, w2, z)))
    for z in extra_examples:
        worst = max(worst, abs(loss_value(m, w, z) - loss_value(m, w2, z)))
    return worst


@dataclass(frozen=True)
class ErrorDecomposition:
    train_error: float
    test_error: float
    generalization_gap: float
    opt_gap: float


def decompose_error(m, w, train_ds, test_ds, ref):
    """Training/testing errors, their gap, and the optimization gap vs ref."""
    train = empirical_risk(m, w, train_ds)
    test = empirical_risk(m, w, test_ds)
    opt_gap = train - ref.f_star
    if opt_gap < -1e-12:
        raise ValueError("reference solution is not optimal: opt gap %g" % opt_gap)
    return ErrorDecomposition(train, test, test - train, opt_gap)


def trace_to_rows(trace, L, G, convex):
    """Rows for the stability CSV: stage, t, delta, same_sample, bound branch/value, violation."""
    rows = []
    for meta in trace.stage_meta:
        etas = meta.etas()
        prev = meta.delta1
        for j in range(meta.length):
            idx = meta.start + j
            differing = bool(trace.hits[idx])
            eta = float(etas[j])
            skip = convex and not differing and eta > 2.0 / L + 1e-15
            branch = "differing" if differing else ("convex_same" if convex else "smooth_same")
            if skip:
                branch = "skipped"
                bound = float("nan")
                viol = 0
            else:
                bound = recurrence_bound(prev, meta.delta1, eta, meta.gamma, G,
                                         differing, convex, L)
                viol = int(trace.deltas[idx] > bound + 1e-9)
            rows.append((meta.stage, j + 1, float(trace.deltas[idx]),
                         int(not differing), branch, bound, viol))
            prev = float(trace.deltas[idx])
    return rows
