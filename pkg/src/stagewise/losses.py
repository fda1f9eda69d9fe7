"""Per-example losses with gradients and data-driven constants.

Four linear-model losses (squared hinge, logistic, square, huber) plus a
synthetic quadratic family whose curvature spectrum, minimizer and gradient
variance are known exactly. The quadratic stores eigenvalues and a seeded
product of Householder reflections instead of a dense Hessian, so large d
stays cheap; its per-example losses add mean-zero linear perturbations, which
leaves the empirical risk exactly equal to the quadratic and makes the
gradient variance the same at every point.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels as K
from .core import SparseExample, dataset_from_examples

KINDS = ("squared_hinge", "logistic", "square", "huber", "quadratic_synthetic")

_KIND_CODE = {
    "squared_hinge": K.SQUARED_HINGE,
    "logistic": K.LOGISTIC,
    "square": K.SQUARE,
    "huber": K.HUBER,
    "quadratic_synthetic": K.QUADRATIC,
}

_N_REFLECTIONS = 3


@dataclass(frozen=True)
class QuadraticProblem:
    """F(w) = 0.5 (w - w*)^T H (w - w*) with H = Q diag(eigs) Q^T.

    Q is a product of seeded Householder reflections; eigenvalues are stored
    ascending, so the PL constant is eigs[0] and the smoothness is eigs[-1].
    F(w*) = 0 by construction.
    """

    eigenvalues: np.ndarray
    minimizer: np.ndarray
    rotation_seed: int
    reflectors: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.eigenvalues, dtype=np.float64)
        if np.any(e <= 0) or np.any(np.diff(e) < 0):
            raise ValueError("eigenvalues must be positive and ascending")
        object.__setattr__(self, "eigenvalues", e)

    @property
    def dim(self):
        return int(self.minimizer.shape[0])

    @property
    def mu(self):
        return float(self.eigenvalues[0])

    @property
    def smoothness(self):
        return float(self.eigenvalues[-1])

    def hessian_apply(self, v):
        out = np.empty_like(v)
        K.quad_hessian_apply(self.eigenvalues, self.reflectors, np.asarray(v, float), np.empty_like(out), out)
        return out

    def hessian_dense(self):
        d = self.dim
        h = np.empty((d, d))
        for i in range(d):
            h[:, i] = self.hessian_apply(np.eye(d)[:, i])
        return h

    def eigenvector(self, i):
        """Unit eigenvector for eigenvalues[i]."""
        e = np.zeros(self.dim)
        e[i] = 1.0
        out = np.empty(self.dim)
        K.hh_backward(self.reflectors, e, out)
        return out

    def value(self, w):
        d = self.dim
        return float(K.quad_value(self.eigenvalues, self.reflectors, self.minimizer,
                                  np.asarray(w, float), np.empty(d), np.empty(d)))


def make_quadratic_problem(mu, smoothness, dim, rotation_seed, minimizer=None):
    """Log-spaced spectrum on [mu, smoothness] under a seeded random rotation."""
    if not 0 < mu <= smoothness:
        raise ValueError("need 0 < mu <= smoothness")
    eigs = np.logspace(np.log10(mu), np.log10(smoothness), dim)
    eigs[0], eigs[-1] = mu, smoothness
    rng = np.random.default_rng(rotation_seed)
    refl = rng.standard_normal((_N_REFLECTIONS, dim))
    refl /= np.linalg.norm(refl, axis=1, keepdims=True)
    if minimizer is None:
        minimizer = rng.standard_normal(dim)
        minimizer /= np.linalg.norm(minimizer)
    return QuadraticProblem(eigs, np.asarray(minimizer, float), rotation_seed, refl)


@dataclass(frozen=True)
class LossModel:
    """A loss kind plus its declared constants (L, G, sigma^2).

    Constants default to None and are filled by fit_constants from the data
    and feasible set; schedules and bound calculators read them from here.
    """

    kind: str
    huber_delta: float = 0.0
    quad: QuadraticProblem = None
    smoothness: float = None
    lipschitz: float = None
    variance: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError("unknown loss kind %r" % self.kind)
        if self.kind == "huber" and self.huber_delta <= 0:
            raise ValueError("huber requires delta > 0")
        if self.kind == "quadratic_synthetic" and self.quad is None:
            raise ValueError("quadratic_synthetic requires a QuadraticProblem")

    @property
    def code(self):
        return _KIND_CODE[self.kind]

    def quad_arrays(self):
        if self.quad is None:
            return K.no_quad()
        return self.quad.eigenvalues, self.quad.reflectors, self.quad.minimizer


def squared_hinge():
    return LossModel("squared_hinge")


def logistic():
    return LossModel("logistic")


def square():
    return LossModel("square")


def huber(delta=1.0):
    return LossModel("huber", huber_delta=float(delta))


def quadratic_loss(problem):
    if problem is None:
        raise ValueError("quadratic_synthetic requires a QuadraticProblem")
    return LossModel(
        "quadratic_synthetic",
        quad=problem,
        smoothness=problem.smoothness,
    )


def loss_value(m, w, z):
    """f(w, z) for one example."""
    w = np.asarray(w, dtype=np.float64)
    if m.kind == "quadratic_synthetic":
        v = m.quad.value(w) + float(np.dot(w[z.indices] - m.quad.minimizer[z.indices], z.values))
    else:
        pred = float(np.dot(w[z.indices], z.values))
        v = float(K.loss_scalar(m.code, z.label, pred, m.huber_delta))
    if not np.isfinite(v):
        raise FloatingPointError("non-finite loss value")
    return v


def loss_gradient(m, w, z):
    """Gradient of f(w, z) in w; sparse support for the linear-model losses."""
    w = np.asarray(w, dtype=np.float64)
    if m.kind == "quadratic_synthetic":
        g = m.quad.hessian_apply(w - m.quad.minimizer)
        g[z.indices] += z.values
    else:
        pred = float(np.dot(w[z.indices], z.values))
        dz = float(K.dloss_scalar(m.code, z.label, pred, m.huber_delta))
        g = np.zeros_like(w)
        g[z.indices] = dz * z.values
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    return g


def empirical_risk(m, w, ds):
    """F_S(w): mean per-example loss."""
    indptr, cols, vals, labels = ds.arrays()
    qe, qh, qw = m.quad_arrays()
    v = float(K.risk_kernel(np.asarray(w, float), indptr, cols, vals, labels,
                            m.code, m.huber_delta, qe, qh, qw))
    if not np.isfinite(v):
        raise FloatingPointError("non-finite empirical risk")
    return v


def full_gradient(m, w, ds):
    """Mean per-example gradient at w."""
    indptr, cols, vals, labels = ds.arrays()
    qe, qh, qw = m.quad_arrays()
    g = K.full_grad_kernel(np.asarray(w, float), indptr, cols, vals, labels,
                           m.code, m.huber_delta, qe, qh, qw)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    return g


def estimate_sigma2(m, w, ds):
    """Exact empirical gradient variance (1/n) sum_i ||g_i - g_bar||^2."""
    indptr, cols, vals, labels = ds.arrays()
    qe, qh, qw = m.quad_arrays()
    return float(K.sigma2_kernel(np.asarray(w, float), indptr, cols, vals, labels,
                                 m.code, m.huber_delta, qe, qh, qw))


def gradient_norms(m, w, ds):
    """Per-example gradient norms at w."""
    indptr, cols, vals, labels = ds.arrays()
    qe, qh, qw = m.quad_arrays()
    return K.grad_norms_kernel(np.asarray(w, float), indptr, cols, vals, labels,
                               m.code, m.huber_delta, qe, qh, qw)


def fit_constants(m, ds, feasible=None, sigma_at=None):
    """Fill (L, G, sigma^2) from the data and the feasible set.

    Per-kind bounds with x2 = max_i ||x_i||, xinf = max_i ||x_i||_inf,
    zmax = sup |w.x| over the set (inf when unconstrained):

      logistic:      L = x2^2 / 4          G = x2
      squared_hinge: L = 2 x2^2            G = 2 (1 + zmax) x2
      square:        L = 2 x2^2            G = 2 (ymax + zmax) x2
      huber(delta):  L = x2^2              G = delta x2
      quadratic:     L = max eigenvalue    G unbounded (left None)

    sigma^2 is measured at each point in sigma_at (default: the origin) and
    the max is declared.
    """
    x2 = ds.max_row_norm()
    xinf = ds.max_abs_feature()
    ymax = float(np.abs(ds.labels).max())
    if feasible is None or feasible.kind == "unconstrained":
        zmax = np.inf
    elif feasible.kind == "l1_ball":
        zmax = feasible.radius * xinf
    else:
        zmax = feasible.radius * x2

    if m.kind == "logistic":
        L, G = 0.25 * x2 * x2, x2
    elif m.kind == "squared_hinge":
        L, G = 2.0 * x2 * x2, 2.0 * (1.0 + zmax) * x2
    elif m.kind == "square":
        L, G = 2.0 * x2 * x2, 2.0 * (ymax + zmax) * x2
    elif m.kind == "huber":
        L, G = x2 * x2, m.huber_delta * x2
    else:
        L, G = m.quad.smoothness, None

    points = [np.zeros(ds.dim)] if sigma_at is None else list(sigma_at)
    sigma2 = max(estimate_sigma2(m, p, ds) for p in points)
    return replace(m, smoothness=float(L),
                   lipschitz=None if G is None or not np.isfinite(G) else float(G),
                   variance=float(sigma2))


def make_quadratic_synthetic(dim, n, mu, smoothness, sigma2, seed, minimizer=None):
    """Quadratic synthetic problem plus a dataset of mean-zero perturbations.

    Example i contributes f(w, z_i) = F(w) + b_i . (w - w*), with sum_i b_i = 0
    and (1/n) sum ||b_i||^2 = sigma2 exactly, so F_S(w) = F(w) and the
    per-example gradient variance equals sigma2 at every w.
    """
    prob = make_quadratic_problem(mu, smoothness, dim, rotation_seed=seed, minimizer=minimizer)
    rng = np.random.default_rng(seed + 1)
    if sigma2 > 0 and n > 1:
        b = rng.standard_normal((n, dim))
        b -= b.mean(axis=0)
        scale = np.sqrt(sigma2 / (np.sum(b * b) / n))
        b *= scale
        idx = np.arange(dim, dtype=np.int64)
        examples = [SparseExample(0.0, idx, b[i]) for i in range(n)]
    else:
        examples = [SparseExample(0.0, np.empty(0, np.int64), np.empty(0)) for _ in range(n)]
    ds = dataset_from_examples(examples, dim=dim)
    model = LossModel("quadratic_synthetic", quad=prob,
                      smoothness=prob.smoothness, variance=float(sigma2))
    return model, ds
