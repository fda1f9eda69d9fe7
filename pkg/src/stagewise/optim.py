"""Optimizers: vanilla SGD under pluggable schedules and the stagewise
anchored-proximal outer loop with its three practical variants.

Runs execute in chunks of kernel iterations between evaluation points; the
index stream is counter-based, so chunking never perturbs the sampled
sequence. A run is deterministic in (seed, config).
"""

import time
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .losses import empirical_risk
from .schedules import Stage, StepSchedule, step_size


class DivergenceError(RuntimeError):
    """An iterate went non-finite; carries the stage and global iteration."""

    def __init__(self, stage, t):
        super().__init__("non-finite iterate at stage %d, iteration %d" % (stage, t))
        self.stage = stage
        self.t = t


@dataclass(frozen=True)
class LogPoint:
    stage: int
    t: int
    cum_t: int
    eta: float
    train_error: float
    test_error: float = None
    wall: float = 0.0


@dataclass
class RunRecord:
    entries: list = field(default_factory=list)
    final_w: np.ndarray = None
    total_iterations: int = 0
    max_grad_norm: float = 0.0
    reached_at: int = None

    def train_curve(self):
        return np.array([(p.cum_t, p.train_error) for p in self.entries])


def _eval_targets(total, eval_every, eval_points):
    """Sorted cumulative iteration counts at which to log, always ending at total."""
    if eval_points is not None:
        pts = sorted({int(p) for p in eval_points if 0 < int(p) <= total})
    elif eval_every:
        pts = list(range(int(eval_every), total + 1, int(eval_every)))
    else:
        pts = []
    if not pts or pts[-1] != total:
        pts.append(total)
    return pts


def geometric_eval_points(total, ratio=1.05):
    """Scale-free evaluation grid: ~log(total)/log(ratio) points up to total."""
    pts = []
    t = 1.0
    while t < total:
        pts.append(int(np.ceil(t)))
        t *= ratio
    pts.append(int(total))
    return sorted(set(pts))


class _Runner:
    """Shared chunked-execution machinery for SGD and stagewise runs."""

    def __init__(self, m, ds, feasible, rng, test_ds=None, track_max_grad=False,
                 on_eval=None):
        self.m = m
        self.ds = ds
        self.feasible = feasible
        self.rng = rng
        self.test_ds = test_ds
        self.track_max = track_max_grad
        self.on_eval = on_eval
        self.record = RunRecord()
        self.max_g = 0.0
        self.t0 = time.perf_counter()
        self.indptr, self.cols, self.vals, self.labels = ds.arrays()
        self.qe, self.qh, self.qw = m.quad_arrays()

    def log(self, stage, t, cum_t, eta, w):
        train = empirical_risk(self.m, w, self.ds)
        test = empirical_risk(self.m, w, self.test_ds) if self.test_ds is not None else None
        self.record.entries.append(
            LogPoint(stage, t, cum_t, eta, train, test, time.perf_counter() - self.t0)
        )
        if self.on_eval is not None:
            self.on_eval(cum_t, w.copy())
        return train

    def _sgd_steps(self, w, sched, counter0, nsteps, t_start, track_max):
        return K.sgd_loop(
            w, self.rng.seed, counter0, nsteps, t_start, sched.code, sched.param,
            self.feasible.code, self.feasible.radius, self.indptr, self.cols,
            self.vals, self.labels, self.m.code, self.m.huber_delta,
            self.qe, self.qh, self.qw, track_max,
        )

    def _stage_steps(self, w, anchor, avg, avg_count, eta, gamma, counter0, nsteps,
                     track_avg, track_max):
        return K.stage_loop(
            w, anchor, avg, avg_count, self.rng.seed, counter0, nsteps, eta, gamma,
            self.feasible.code, self.feasible.radius, self.indptr, self.cols,
            self.vals, self.labels, self.m.code, self.m.huber_delta,
            self.qe, self.qh, self.qw, track_avg, track_max,
        )

    def sgd_chunk(self, w, sched, nsteps, t_start, stage):
        """Run nsteps from the stream head; raises with the offending t on divergence."""
        before = w.copy()
        counter0 = self.rng.counter
        status, done, mg = self._sgd_steps(w, sched, counter0, nsteps, t_start, self.track_max)
        self.max_g = max(self.max_g, mg)
        if status != K.OK or not np.all(np.isfinite(w)):
            for s in range(nsteps):
                wx = before.copy()
                st, _, _ = self._sgd_steps(wx, sched, counter0, s + 1, t_start, False)
                if st != K.OK or not np.all(np.isfinite(wx)):
                    raise DivergenceError(stage, t_start + s)
            raise DivergenceError(stage, t_start + nsteps - 1)
        self.rng.skip(nsteps)

    def stage_chunk(self, w, anchor, avg, avg_count, eta, gamma, nsteps, track_avg,
                    stage, t_start):
        before = w.copy()
        counter0 = self.rng.counter
        status, done, mg = self._stage_steps(w, anchor, avg, avg_count, eta, gamma,
                                             counter0, nsteps, track_avg, self.track_max)
        self.max_g = max(self.max_g, mg)
        if status != K.OK or not np.all(np.isfinite(w)):
            scratch = np.zeros_like(w)
            for s in range(nsteps):
                wx = before.copy()
                st, _, _ = self._stage_steps(wx, anchor, scratch, 0, eta, gamma,
                                             counter0, s + 1, False, False)
                if st != K.OK or not np.all(np.isfinite(wx)):
                    raise DivergenceError(stage, t_start + s)
            raise DivergenceError(stage, t_start + nsteps - 1)
        self.rng.skip(nsteps)


def sgd_run(m, ds, feasible, sched, w0, T, rng, eval_every=None, eval_points=None,
            test_ds=None, track_max_grad=False, target_risk=None, on_eval=None):
    """T projected stochastic gradient steps from w0 under `sched`.

    Logs the training error at the evaluation grid; stops early (recording
    `reached_at`) once an evaluation falls at or below target_risk.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    w = np.array(w0, dtype=np.float64, copy=True)
    if w.shape[0] != ds.dim:
        raise ValueError("w0 dimension %d != dataset dimension %d" % (w.shape[0], ds.dim))
    runner = _Runner(m, ds, feasible, rng, test_ds, track_max_grad, on_eval)
    rec = runner.record

    if sched.kind == "piecewise_constant":
        segments = []
        acc = 0
        for v, ln in zip(sched.values, sched.lengths):
            take = min(ln, T - acc)
            if take > 0:
                segments.append([StepSchedule("constant", v), take])
                acc += take
        if acc < T:
            segments.append([StepSchedule("constant", sched.values[-1]), T - acc])
    else:
        segments = [[sched, T]]

    runner.log(1, 0, 0, step_size(sched, 1), w)
    targets = _eval_targets(T, eval_every, eval_points)
    cum = 0
    seg_idx = 0
    for target in targets:
        while cum < target:
            seg, seg_left = segments[seg_idx]
            nsteps = min(target - cum, seg_left)
            runner.sgd_chunk(w, seg, nsteps, cum + 1, stage=1)
            cum += nsteps
            segments[seg_idx][1] -= nsteps
            if segments[seg_idx][1] == 0 and seg_idx + 1 < len(segments):
                seg_idx += 1
        train = runner.log(1, cum, cum, step_size(sched, min(cum + 1, T)), w)
        if target_risk is not None and train <= target_risk:
            rec.reached_at = cum
            break

    rec.final_w = w
    rec.total_iterations = cum
    rec.max_grad_norm = runner.max_g
    return rec


def _run_stage(runner, w, stage_idx, eta, gamma, iters, return_op, cum0,
               targets, target_risk):
    """One anchored stage; returns (stage output, reached_at or None).

    The interior evaluation points log the running iterate; the stage-end
    entry logs the stage output under the configured return operator.
    """
    rng = runner.rng
    anchor = w.copy()
    avg = np.zeros_like(w)
    track_avg = return_op == "average"
    counter_base = rng.counter
    done = 0
    lo = bisect_right(targets, cum0)
    interior = [t - cum0 for t in targets[lo:] if t - cum0 < iters]
    for nxt in interior + [iters]:
        if nxt > done:
            runner.stage_chunk(w, anchor, avg, done, eta, gamma, nxt - done,
                               track_avg, stage_idx, cum0 + done + 1)
            done = nxt
        if done < iters:
            train = runner.log(stage_idx, done, cum0 + done, eta, w)
            if target_risk is not None and train <= target_risk:
                return w, cum0 + done

    if return_op == "last":
        out = w
    elif return_op == "average":
        out = avg
    else:
        # tau is drawn after the stage's index draws so twin runs stay aligned
        tau = rng.draw(iters) + 1
        out = anchor.copy()
        if tau > 1:
            scratch = np.zeros_like(w)
            status, _, _ = runner._stage_steps(out, anchor, scratch, 0, eta, gamma,
                                               counter_base, tau - 1, False, False)
            if status != K.OK or not np.all(np.isfinite(out)):
                raise DivergenceError(stage_idx, cum0 + tau - 1)
    train = runner.log(stage_idx, iters, cum0 + iters, eta, out)
    if target_risk is not None and train <= target_risk:
        return out, cum0 + iters
    return out, None


def run_stages(m, ds, feasible, stages, gamma, return_op, w0, rng,
               eval_every=None, eval_points=None, test_ds=None,
               track_max_grad=False, target_risk=None, on_eval=None):
    """Execute Stage(eta, iters) entries with the anchored-prox update.

    Stage k anchors and starts at the previous stage's output; the stage
    output is the last iterate, the running average of post-step iterates, or
    a uniformly sampled iterate, per return_op.
    """
    if not stages:
        raise ValueError("need at least one stage")
    if return_op not in ("last", "average", "random_iterate"):
        raise ValueError("unknown return op %r" % return_op)
    w = np.array(w0, dtype=np.float64, copy=True)
    if w.shape[0] != ds.dim:
        raise ValueError("w0 dimension %d != dataset dimension %d" % (w.shape[0], ds.dim))
    runner = _Runner(m, ds, feasible, rng, test_ds, track_max_grad, on_eval)
    rec = runner.record
    total = sum(s.iters for s in stages)
    targets = _eval_targets(total, eval_every, eval_points)
    runner.log(1, 0, 0, stages[0].eta, w)
    cum = 0
    for k, st in enumerate(stages, start=1):
        w, reached = _run_stage(runner, w, k, st.eta, gamma, st.iters, return_op,
                                cum, targets, target_risk)
        if reached is not None:
            rec.reached_at = reached
            cum = reached if reached > cum else cum + st.iters
            break
        cum += st.iters
    rec.final_w = w
    rec.total_iterations = cum
    rec.max_grad_norm = runner.max_g
    return rec


def start_run(m, ds, feasible, sched, w0, rng, **kwargs):
    """Stagewise regularized run under a regime-built StageSchedule."""
    if sched.n_stages < 1:
        raise ValueError("schedule has no stages")
    return run_stages(m, ds, feasible, sched.stages, sched.gamma, sched.return_op,
                      w0, rng, **kwargs)


def variant_run(m, ds, feasible, variant, stage_lengths, eta0, decay, gamma,
                w0, rng, **kwargs):
    """Practical stagewise variants: eta_k = eta0 * decay^(k-1).

    V1: gamma = inf, last iterate; V2: finite gamma, last iterate;
    V3: finite gamma, averaged iterate. V2 with gamma = inf collapses to V1.
    """
    if variant not in ("V1", "V2", "V3"):
        raise ValueError("variant must be V1, V2 or V3")
    if not stage_lengths:
        raise ValueError("stage_lengths must be nonempty")
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must lie in (0, 1)")
    if variant == "V1":
        gamma = np.inf
    return_op = "average" if variant == "V3" else "last"
    stages = tuple(
        Stage(float("nan"), eta0 * decay**k, int(t)) for k, t in enumerate(stage_lengths)
    )
    return run_stages(m, ds, feasible, stages, gamma, return_op, w0, rng, **kwargs)
