"""Hot numeric kernels.

Every sequential inner loop lives here: plain SGD steps, anchored proximal
stage steps, coupled twin steps for the stability probe, and full-dataset
sweeps (risk, mean gradient, gradient variance). By default the loops are
compiled with numba's @njit. Setting STAGEWISE_BACKEND=numpy selects a plain
Python/NumPy fallback with identical semantics (no compilation, much slower
on long runs). ``stagewise bench`` compares the two backends.

Loss kinds are encoded as ints: 0 squared hinge, 1 logistic, 2 square,
3 huber, 4 synthetic quadratic. Feasible sets: 0 unconstrained, 1 l1 ball,
2 l2 ball. The synthetic quadratic applies its Hessian through a short
product of Householder reflections so large d stays cheap.
"""

import math
import os

import numpy as np

_env = os.environ.get("STAGEWISE_BACKEND", "").strip().lower()
if _env not in ("", "numba", "numpy"):
    raise ValueError("STAGEWISE_BACKEND must be 'numba' or 'numpy', got %r" % _env)

USING_NUMBA = False
if _env != "numpy":
    try:
        from numba import njit

        USING_NUMBA = True
    except ImportError:
        pass

if not USING_NUMBA:

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


# loss kind codes
SQUARED_HINGE = 0
LOGISTIC = 1
SQUARE = 2
HUBER = 3
QUADRATIC = 4

# feasible set codes
UNCONSTRAINED = 0
L1_BALL = 1
L2_BALL = 2

# stop reasons returned by the loop kernels
OK = 0
NON_FINITE = 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)
_MASK = (1 << 64) - 1


@njit(cache=True)
def _mix64(x):
    z = x
    z = (z ^ (z >> _U30)) * _MIX1
    z = (z ^ (z >> _U27)) * _MIX2
    return z ^ (z >> _U31)


if USING_NUMBA:

    @njit(cache=True)
    def draw_at(seed, counter, n):
        """Index in [0, n) at position `counter` of the stream; pure in (seed, counter)."""
        x = np.uint64(seed) + np.uint64(counter + 1) * _GOLDEN
        return np.int64(_mix64(x) % np.uint64(n))

else:

    def draw_at(seed, counter, n):
        """Index in [0, n) at position `counter` of the stream; pure in (seed, counter)."""
        x = (int(seed) + (int(counter) + 1) * 0x9E3779B97F4A7C15) & _MASK
        x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
        x = x ^ (x >> 31)
        return np.int64(x % int(n))


def draw_block(seed, counter0, count, n):
    """Vectorized draw_at over counters counter0 .. counter0+count-1."""
    ks = np.arange(counter0 + 1, counter0 + 1 + count, dtype=np.uint64)
    z = np.uint64(seed) + ks * _GOLDEN
    z = (z ^ (z >> _U30)) * _MIX1
    z = (z ^ (z >> _U27)) * _MIX2
    z = z ^ (z >> _U31)
    return (z % np.uint64(n)).astype(np.int64)


def draw_at_py(seed, counter, n):
    """Masked-int reference implementation of draw_at (oracle for tests)."""
    x = (seed + (counter + 1) * 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    x = x ^ (x >> 31)
    return x % n


@njit(cache=True)
def loss_scalar(kind, y, z, delta):
    """Per-example loss as a function of the prediction z = w.x."""
    if kind == SQUARED_HINGE:
        m = 1.0 - y * z
        if m > 0.0:
            return m * m
        return 0.0
    if kind == LOGISTIC:
        a = -y * z
        if a > 35.0:
            return a
        return math.log1p(math.exp(a))
    if kind == SQUARE:
        r = y - z
        return r * r
    # huber
    r = y - z
    a = abs(r)
    if a <= delta:
        return 0.5 * r * r
    return delta * (a - 0.5 * delta)


@njit(cache=True)
def dloss_scalar(kind, y, z, delta):
    """d loss / d z. Squared hinge is C1, so the kink at yz=1 maps to 0."""
    if kind == SQUARED_HINGE:
        m = 1.0 - y * z
        if m > 0.0:
            return -2.0 * y * m
        return 0.0
    if kind == LOGISTIC:
        a = y * z
        if a > 35.0:
            return -y * math.exp(-a)
        return -y / (1.0 + math.exp(a))
    if kind == SQUARE:
        return -2.0 * (y - z)
    r = y - z
    if abs(r) <= delta:
        return -r
    if r > 0.0:
        return -delta
    return delta


@njit(cache=True)
def _sparse_dot(w, cols, vals, lo, hi):
    s = 0.0
    for j in range(lo, hi):
        s += w[cols[j]] * vals[j]
    return s


@njit(cache=True)
def hh_forward(hh, v, out):
    """out = Q^T v where Q = P_0 P_1 ... P_{k-1} (Householder reflections)."""
    d = v.shape[0]
    for i in range(d):
        out[i] = v[i]
    for r in range(hh.shape[0]):
        s = 0.0
        for i in range(d):
            s += hh[r, i] * out[i]
        s *= 2.0
        for i in range(d):
            out[i] -= s * hh[r, i]


@njit(cache=True)
def hh_backward(hh, v, out):
    """out = Q v (reflections applied in reverse order)."""
    d = v.shape[0]
    for i in range(d):
        out[i] = v[i]
    for r in range(hh.shape[0] - 1, -1, -1):
        s = 0.0
        for i in range(d):
            s += hh[r, i] * out[i]
        s *= 2.0
        for i in range(d):
            out[i] -= s * hh[r, i]


@njit(cache=True)
def quad_hessian_apply(eigs, hh, v, scratch, out):
    """out = H v for H = Q diag(eigs) Q^T."""
    hh_forward(hh, v, scratch)
    for i in range(v.shape[0]):
        scratch[i] *= eigs[i]
    hh_backward(hh, scratch, out)


@njit(cache=True)
def quad_value(eigs, hh, wstar, w, scratch_a, scratch_b):
    """0.5 (w - w*)^T H (w - w*)."""
    d = w.shape[0]
    for i in range(d):
        scratch_a[i] = w[i] - wstar[i]
    hh_forward(hh, scratch_a, scratch_b)
    s = 0.0
    for i in range(d):
        s += eigs[i] * scratch_b[i] * scratch_b[i]
    return 0.5 * s


@njit(cache=True)
def project_l1(v, radius):
    """Euclidean projection of v onto {u : ||u||_1 <= radius}, in place.

    Sorted-threshold method: soft-threshold at the tau for which the result's
    l1 norm equals radius when ||v||_1 > radius.
    """
    d = v.shape[0]
    s = 0.0
    for i in range(d):
        s += abs(v[i])
    if s <= radius:
        return
    mag = np.abs(v)
    mag = np.sort(mag)[::-1]
    csum = 0.0
    tau = 0.0
    k = 0
    for j in range(d):
        csum += mag[j]
        t = (csum - radius) / (j + 1.0)
        if t < mag[j]:
            tau = t
            k = j + 1
    # k is the last prefix where the threshold stays below the sorted value
    _ = k
    for i in range(d):
        a = abs(v[i]) - tau
        if a <= 0.0:
            v[i] = 0.0
        elif v[i] > 0.0:
            v[i] = a
        else:
            v[i] = -a


@njit(cache=True)
def project_l2(v, radius):
    d = v.shape[0]
    s = 0.0
    for i in range(d):
        s += v[i] * v[i]
    nrm = math.sqrt(s)
    if nrm > radius:
        scale = radius / nrm
        for i in range(d):
            v[i] *= scale


@njit(cache=True)
def _project(v, set_kind, radius):
    if set_kind == L1_BALL:
        project_l1(v, radius)
    elif set_kind == L2_BALL:
        project_l2(v, radius)


@njit(cache=True)
def _sched_eta(sched_kind, p, t):
    # 0: (2t+1) / (2 p (t+1)^2) with p = mu; 1: p / sqrt(t); 2: constant p
    if sched_kind == 0:
        return (2.0 * t + 1.0) / (2.0 * p * (t + 1.0) * (t + 1.0))
    if sched_kind == 1:
        return p / math.sqrt(t)
    return p


@njit(cache=True)
def sgd_loop(
    w,
    seed,
    counter0,
    nsteps,
    t_start,
    sched_kind,
    sched_p,
    set_kind,
    radius,
    indptr,
    cols,
    vals,
    labels,
    kind,
    hdelta,
    q_eigs,
    q_hh,
    q_wstar,
    track_max,
):
    """Projected SGD steps t_start .. t_start+nsteps-1; mutates w.

    Returns (stop_reason, steps_done, max_sampled_gradient_norm). On a
    non-finite prediction the loop exits early with NON_FINITE and the count
    of completed steps.
    """
    n = labels.shape[0]
    d = w.shape[0]
    max_g = 0.0
    dense = kind == QUADRATIC
    g = np.empty(d)
    scratch = np.empty(d)
    diff = np.empty(d)
    for s_idx in range(nsteps):
        t = t_start + s_idx
        eta = _sched_eta(sched_kind, sched_p, t)
        i = draw_at(seed, counter0 + s_idx, n)
        lo = indptr[i]
        hi = indptr[i + 1]
        if dense:
            for j in range(d):
                diff[j] = w[j] - q_wstar[j]
            quad_hessian_apply(q_eigs, q_hh, diff, scratch, g)
            for j in range(lo, hi):
                g[cols[j]] += vals[j]
            if not math.isfinite(g[0]):
                return NON_FINITE, s_idx, max_g
            if track_max:
                s2 = 0.0
                for j in range(d):
                    s2 += g[j] * g[j]
                ng = math.sqrt(s2)
                if ng > max_g:
                    max_g = ng
            for j in range(d):
                w[j] -= eta * g[j]
        else:
            z = _sparse_dot(w, cols, vals, lo, hi)
            if not math.isfinite(z):
                return NON_FINITE, s_idx, max_g
            dz = dloss_scalar(kind, labels[i], z, hdelta)
            if track_max:
                s2 = 0.0
                for j in range(lo, hi):
                    s2 += vals[j] * vals[j]
                ng = abs(dz) * math.sqrt(s2)
                if ng > max_g:
                    max_g = ng
            for j in range(lo, hi):
                w[cols[j]] -= eta * dz * vals[j]
        _project(w, set_kind, radius)
    return OK, nsteps, max_g


@njit(cache=True)
def stage_loop(
    w,
    anchor,
    avg,
    avg_count0,
    seed,
    counter0,
    nsteps,
    eta,
    gamma,
    set_kind,
    radius,
    indptr,
    cols,
    vals,
    labels,
    kind,
    hdelta,
    q_eigs,
    q_hh,
    q_wstar,
    track_avg,
    track_max,
):
    """Anchored proximal steps with constant eta; mutates w and avg.

    The update solves min_u g.u + ||u - w||^2/(2 eta) + ||u - anchor||^2/(2 gamma)
    in closed form, then projects. gamma = inf takes the plain-SGD branch
    exactly (no rounding drift). When track_avg, `avg` accumulates the running
    mean of the post-step iterates, continuing from avg_count0 prior entries.
    """
    n = labels.shape[0]
    d = w.shape[0]
    max_g = 0.0
    dense = kind == QUADRATIC
    finite_gamma = math.isfinite(gamma)
    if finite_gamma:
        ca = gamma / (eta + gamma)
        cb = eta / (eta + gamma)
        cc = eta * gamma / (eta + gamma)
    else:
        ca = 1.0
        cb = 0.0
        cc = eta
    g = np.empty(d)
    scratch = np.empty(d)
    diff = np.empty(d)
    cnt = avg_count0
    for s_idx in range(nsteps):
        i = draw_at(seed, counter0 + s_idx, n)
        lo = indptr[i]
        hi = indptr[i + 1]
        if dense:
            for j in range(d):
                diff[j] = w[j] - q_wstar[j]
            quad_hessian_apply(q_eigs, q_hh, diff, scratch, g)
            for j in range(lo, hi):
                g[cols[j]] += vals[j]
        else:
            z = _sparse_dot(w, cols, vals, lo, hi)
            if not math.isfinite(z):
                return NON_FINITE, s_idx, max_g
            dz = dloss_scalar(kind, labels[i], z, hdelta)
            for j in range(d):
                g[j] = 0.0
            for j in range(lo, hi):
                g[cols[j]] = dz * vals[j]
        if not math.isfinite(g[0]):
            return NON_FINITE, s_idx, max_g
        if track_max:
            s2 = 0.0
            for j in range(d):
                s2 += g[j] * g[j]
            ng = math.sqrt(s2)
            if ng > max_g:
                max_g = ng
        if finite_gamma:
            for j in range(d):
                w[j] = ca * w[j] + cb * anchor[j] - cc * g[j]
        else:
            for j in range(d):
                w[j] -= cc * g[j]
        _project(w, set_kind, radius)
        if track_avg:
            cnt += 1
            for j in range(d):
                avg[j] += (w[j] - avg[j]) / cnt
    return OK, nsteps, max_g


@njit(cache=True)
def _twin_grad(
    w, i, swap_pos, indptr, cols, vals, labels, s_cols, s_vals, s_label,
    kind, hdelta, q_eigs, q_hh, q_wstar, g, scratch, diff,
):
    """Gradient of example i for the twin that holds the swapped example."""
    d = w.shape[0]
    if i == swap_pos:
        lo = 0
        hi = s_cols.shape[0]
        if kind == QUADRATIC:
            for j in range(d):
                diff[j] = w[j] - q_wstar[j]
            quad_hessian_apply(q_eigs, q_hh, diff, scratch, g)
            for j in range(lo, hi):
                g[s_cols[j]] += s_vals[j]
            return
        z = 0.0
        for j in range(lo, hi):
            z += w[s_cols[j]] * s_vals[j]
        dz = dloss_scalar(kind, s_label, z, hdelta)
        for j in range(d):
            g[j] = 0.0
        for j in range(lo, hi):
            g[s_cols[j]] = dz * s_vals[j]
        return
    lo = indptr[i]
    hi = indptr[i + 1]
    if kind == QUADRATIC:
        for j in range(d):
            diff[j] = w[j] - q_wstar[j]
        quad_hessian_apply(q_eigs, q_hh, diff, scratch, g)
        for j in range(lo, hi):
            g[cols[j]] += vals[j]
        return
    z = _sparse_dot(w, cols, vals, lo, hi)
    dz = dloss_scalar(kind, labels[i], z, hdelta)
    for j in range(d):
        g[j] = 0.0
    for j in range(lo, hi):
        g[cols[j]] = dz * vals[j]


@njit(cache=True)
def twin_loop(
    w1,
    w2,
    anchor1,
    anchor2,
    avg1,
    avg2,
    seed,
    counter0,
    nsteps,
    t_start,
    sched_kind,
    sched_p,
    gamma,
    set_kind,
    radius,
    swap_pos,
    indptr,
    cols,
    vals,
    labels,
    s_cols,
    s_vals,
    s_label,
    kind,
    hdelta,
    q_eigs,
    q_hh,
    q_wstar,
    track_avg,
    deltas,
    hits,
):
    """Coupled twin steps sharing one index stream; twin 2 sees the swap.

    deltas[s_idx] receives ||w1 - w2|| AFTER step s_idx; hits[s_idx] is 1 when
    the drawn index equals swap_pos (the differing-example branch). The caller
    records the pre-loop distance as the stage-initial delta_1.
    """
    n = labels.shape[0]
    d = w1.shape[0]
    finite_gamma = math.isfinite(gamma)
    g = np.empty(d)
    scratch = np.empty(d)
    diff = np.empty(d)
    for s_idx in range(nsteps):
        t = t_start + s_idx
        eta = _sched_eta(sched_kind, sched_p, t)
        if finite_gamma:
            ca = gamma / (eta + gamma)
            cb = eta / (eta + gamma)
            cc = eta * gamma / (eta + gamma)
        else:
            ca = 1.0
            cb = 0.0
            cc = eta
        i = draw_at(seed, counter0 + s_idx, n)
        hits[s_idx] = 1 if i == swap_pos else 0

        # twin 1: original dataset
        lo = indptr[i]
        hi = indptr[i + 1]
        if kind == QUADRATIC:
            for j in range(d):
                diff[j] = w1[j] - q_wstar[j]
            quad_hessian_apply(q_eigs, q_hh, diff, scratch, g)
            for j in range(lo, hi):
                g[cols[j]] += vals[j]
        else:
            z = _sparse_dot(w1, cols, vals, lo, hi)
            if not math.isfinite(z):
                return NON_FINITE, s_idx
            dz = dloss_scalar(kind, labels[i], z, hdelta)
            for j in range(d):
                g[j] = 0.0
            for j in range(lo, hi):
                g[cols[j]] = dz * vals[j]
        if not math.isfinite(g[0]):
            return NON_FINITE, s_idx
        if finite_gamma:
            for j in range(d):
                w1[j] = ca * w1[j] + cb * anchor1[j] - cc * g[j]
        else:
            for j in range(d):
                w1[j] -= cc * g[j]
        _project(w1, set_kind, radius)

        # twin 2: neighboring dataset
        _twin_grad(
            w2, i, swap_pos, indptr, cols, vals, labels, s_cols, s_vals,
            s_label, kind, hdelta, q_eigs, q_hh, q_wstar, g, scratch, diff,
        )
        if not math.isfinite(g[0]):
            return NON_FINITE, s_idx
        if finite_gamma:
            for j in range(d):
                w2[j] = ca * w2[j] + cb * anchor2[j] - cc * g[j]
        else:
            for j in range(d):
                w2[j] -= cc * g[j]
        _project(w2, set_kind, radius)

        if track_avg:
            c = s_idx + 1.0
            for j in range(d):
                avg1[j] += (w1[j] - avg1[j]) / c
                avg2[j] += (w2[j] - avg2[j]) / c

        s2 = 0.0
        for j in range(d):
            r = w1[j] - w2[j]
            s2 += r * r
        deltas[s_idx] = math.sqrt(s2)
    return OK, nsteps


@njit(cache=True)
def risk_kernel(w, indptr, cols, vals, labels, kind, hdelta, q_eigs, q_hh, q_wstar):
    """Mean per-example loss over the dataset."""
    n = labels.shape[0]
    d = w.shape[0]
    total = 0.0
    if kind == QUADRATIC:
        sa = np.empty(d)
        sb = np.empty(d)
        base = quad_value(q_eigs, q_hh, q_wstar, w, sa, sb)
        for i in range(n):
            s = 0.0
            for j in range(indptr[i], indptr[i + 1]):
                s += (w[cols[j]] - q_wstar[cols[j]]) * vals[j]
            total += base + s
        return total / n
    for i in range(n):
        z = _sparse_dot(w, cols, vals, indptr[i], indptr[i + 1])
        total += loss_scalar(kind, labels[i], z, hdelta)
    return total / n


@njit(cache=True)
def full_grad_kernel(w, indptr, cols, vals, labels, kind, hdelta, q_eigs, q_hh, q_wstar):
    """Mean per-example gradient."""
    n = labels.shape[0]
    d = w.shape[0]
    out = np.zeros(d)
    if kind == QUADRATIC:
        scratch = np.empty(d)
        diff = np.empty(d)
        for j in range(d):
            diff[j] = w[j] - q_wstar[j]
        quad_hessian_apply(q_eigs, q_hh, diff, scratch, out)
        for i in range(n):
            for j in range(indptr[i], indptr[i + 1]):
                out[cols[j]] += vals[j] / n
        return out
    for i in range(n):
        z = _sparse_dot(w, cols, vals, indptr[i], indptr[i + 1])
        dz = dloss_scalar(kind, labels[i], z, hdelta)
        for j in range(indptr[i], indptr[i + 1]):
            out[cols[j]] += dz * vals[j] / n
    return out


@njit(cache=True)
def sigma2_kernel(w, indptr, cols, vals, labels, kind, hdelta, q_eigs, q_hh, q_wstar):
    """Exact empirical gradient variance (1/n) sum ||g_i - g_bar||^2."""
    n = labels.shape[0]
    d = w.shape[0]
    gbar = full_grad_kernel(
        w, indptr, cols, vals, labels, kind, hdelta, q_eigs, q_hh, q_wstar
    )
    g = np.empty(d)
    scratch = np.empty(d)
    diff = np.empty(d)
    total = 0.0
    for i in range(n):
        lo = indptr[i]
        hi = indptr[i + 1]
        if kind == QUADRATIC:
            for j in range(d):
                diff[j] = w[j] - q_wstar[j]
            quad_hessian_apply(q_eigs, q_hh, diff, scratch, g)
            for j in range(lo, hi):
                g[cols[j]] += vals[j]
        else:
            z = _sparse_dot(w, cols, vals, lo, hi)
            dz = dloss_scalar(kind, labels[i], z, hdelta)
            for j in range(d):
                g[j] = 0.0
            for j in range(lo, hi):
                g[cols[j]] = dz * vals[j]
        s2 = 0.0
        for j in range(d):
            r = g[j] - gbar[j]
            s2 += r * r
        total += s2
    return total / n


@njit(cache=True)
def grad_norms_kernel(w, indptr, cols, vals, labels, kind, hdelta, q_eigs, q_hh, q_wstar):
    """Per-example gradient norms at w."""
    n = labels.shape[0]
    d = w.shape[0]
    out = np.empty(n)
    g = np.empty(d)
    scratch = np.empty(d)
    diff = np.empty(d)
    for i in range(n):
        lo = indptr[i]
        hi = indptr[i + 1]
        if kind == QUADRATIC:
            for j in range(d):
                diff[j] = w[j] - q_wstar[j]
            quad_hessian_apply(q_eigs, q_hh, diff, scratch, g)
            for j in range(lo, hi):
                g[cols[j]] += vals[j]
            s2 = 0.0
            for j in range(d):
                s2 += g[j] * g[j]
        else:
            z = _sparse_dot(w, cols, vals, lo, hi)
            dz = dloss_scalar(kind, labels[i], z, hdelta)
            s2 = 0.0
            for j in range(lo, hi):
                s2 += vals[j] * vals[j]
            s2 *= dz * dz
        out[i] = math.sqrt(s2)
    return out


_EMPTY_F = np.empty(0, dtype=np.float64)
_EMPTY_HH = np.empty((0, 0), dtype=np.float64)


def no_quad():
    """Placeholder quadratic arrays for the linear-model losses."""
    return _EMPTY_F, _EMPTY_HH, _EMPTY_F


def warmup():
    """Trigger compilation of every kernel on a tiny problem (no-op fallback)."""
    if not USING_NUMBA:
        return
    d = 2
    w = np.zeros(d)
    indptr = np.array([0, 1], dtype=np.int64)
    cols = np.array([0], dtype=np.int64)
    vals = np.array([1.0])
    labels = np.array([1.0])
    qe, qh, qw = no_quad()
    sgd_loop(w, 1, 0, 1, 1, 0, 1.0, UNCONSTRAINED, 0.0, indptr, cols, vals,
             labels, LOGISTIC, 0.0, qe, qh, qw, True)
    avg = np.zeros(d)
    stage_loop(w, w.copy(), avg, 0, 1, 0, 1, 0.1, np.inf, L1_BALL, 1.0,
               indptr, cols, vals, labels, SQUARED_HINGE, 0.0, qe, qh, qw,
               True, True)
    deltas = np.zeros(1)
    hits = np.zeros(1, dtype=np.int64)
    twin_loop(w, w.copy(), w.copy(), w.copy(), avg, avg.copy(), 1, 0, 1, 1,
              2, 0.1, np.inf, UNCONSTRAINED, 0.0, 0, indptr, cols, vals,
              labels, cols, vals, 1.0, LOGISTIC, 0.0, qe, qh, qw, True,
              deltas, hits)
    risk_kernel(w, indptr, cols, vals, labels, LOGISTIC, 0.0, qe, qh, qw)
    full_grad_kernel(w, indptr, cols, vals, labels, SQUARE, 0.0, qe, qh, qw)
    sigma2_kernel(w, indptr, cols, vals, labels, HUBER, 1.0, qe, qh, qw)
    grad_norms_kernel(w, indptr, cols, vals, labels, LOGISTIC, 0.0, qe, qh, qw)
