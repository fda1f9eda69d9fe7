"""Step-size schedules and the three analytic stage-schedule regimes."""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StepSchedule:
    """Per-iteration step sizes for plain SGD.

    kinds:
      poly_one_over_t: eta_t = (2t+1) / (2 mu (t+1)^2)
      poly_inv_sqrt:   eta_t = c / sqrt(t)
      constant:        eta_t = c
      piecewise_constant: c_values[j] for lengths[j] iterations each
    """

    kind: str
    param: float = 0.0
    values: tuple = ()
    lengths: tuple = ()

    def __post_init__(self):
        if self.kind not in ("poly_one_over_t", "poly_inv_sqrt", "constant", "piecewise_constant"):
            raise ValueError("unknown step schedule kind %r" % self.kind)
        if self.kind == "piecewise_constant":
            if not self.values or len(self.values) != len(self.lengths):
                raise ValueError("piecewise schedule needs matching values and lengths")
            if any(v <= 0 for v in self.values) or any(t < 1 for t in self.lengths):
                raise ValueError("piecewise steps must be positive with lengths >= 1")
        elif self.param <= 0:
            raise ValueError("schedule parameter must be positive")

    @property
    def code(self):
        return {"poly_one_over_t": 0, "poly_inv_sqrt": 1, "constant": 2}.get(self.kind, -1)


def poly_one_over_t(mu):
    return StepSchedule("poly_one_over_t", float(mu))


def poly_inv_sqrt(c):
    return StepSchedule("poly_inv_sqrt", float(c))


def constant(eta):
    return StepSchedule("constant", float(eta))


def piecewise_constant(values, lengths):
    return StepSchedule("piecewise_constant", 0.0, tuple(float(v) for v in values),
                        tuple(int(t) for t in lengths))


def geometric_decay(eta0, decay, lengths):
    """eta0 * decay^(k-1) held for lengths[k-1] iterations (stagewise V1 shape)."""
    values = [eta0 * decay**k for k in range(len(lengths))]
    return piecewise_constant(values, lengths)


def step_size(s, t):
    """The schedule's value at iteration t >= 1."""
    if t < 1:
        raise ValueError("iterations are 1-based")
    if s.kind == "poly_one_over_t":
        return (2.0 * t + 1.0) / (2.0 * s.param * (t + 1.0) ** 2)
    if s.kind == "poly_inv_sqrt":
        return s.param / math.sqrt(t)
    if s.kind == "constant":
        return s.param
    acc = 0
    for v, ln in zip(s.values, s.lengths):
        acc += ln
        if t <= acc:
            return v
    return s.values[-1]


@dataclass(frozen=True)
class Stage:
    eps: float
    eta: float
    iters: int


@dataclass(frozen=True)
class StageSchedule:
    """Per-stage (eps_k, eta_k, T_k) plus the regime constants that built them.

    eta_k * T_k equals `stage_constant` for every stage: T_k is the ceiling of
    the regime formula and eta_k = stage_constant / T_k, which keeps eta_k at
    or below the formula value (the direction the per-stage analysis needs).
    """

    regime: str
    eps0: float
    target_eps: float
    mu: float
    gamma: float
    alpha: float = 1.0
    theta: float = 1.0
    sigma2: float = 0.0
    lipschitz: float = 0.0
    smoothness: float = 0.0
    return_op: str = "average"
    stages: tuple = ()

    @property
    def n_stages(self):
        return len(self.stages)

    @property
    def stage_constant(self):
        if self.regime == "convex":
            return 1.5 / self.mu
        if self.regime == "quasi_convex":
            return 1.5 / (self.theta * self.mu)
        return 1.0 / self.mu

    def total_iterations(self):
        return sum(s.iters for s in self.stages)


def _n_stages(eps0, target_eps):
    if not 0 < target_eps < eps0:
        raise ValueError("need 0 < target_eps < eps0")
    return max(1, math.ceil(math.log2(eps0 / target_eps)))


def _build(formula_T, const, n, eps0, eta_cap=None):
    stages = []
    for k in range(1, n + 1):
        eps_k = eps0 / 2.0**k
        T_k = max(1, math.ceil(formula_T(eps_k)))
        eta_k = const / T_k
        if eta_cap is not None and eta_k > eta_cap:
            # respect the smoothness precondition; extend T_k to keep eta*T
            eta_k = eta_cap
            T_k = max(1, math.ceil(const / eta_k))
            eta_k = const / T_k
        stages.append(Stage(eps_k, eta_k, T_k))
    return tuple(stages)


def convex_schedule(eps0, target_eps, mu, sigma2, smoothness, alpha=None, gamma=None):
    """T_k = 9 sigma^2 / (2 mu eps_k alpha), eta_k = eps_k alpha / (3 sigma^2),
    gamma >= 1.5/mu, averaged stage returns."""
    if sigma2 <= 0:
        raise ValueError("convex regime needs sigma2 > 0")
    n = _n_stages(eps0, target_eps)
    if alpha is None:
        alpha = min(1.0, 3.0 * sigma2 / (eps0 * smoothness))
    if gamma is None:
        gamma = 1.5 / mu
    if np.isfinite(gamma) and gamma < 1.5 / mu - 1e-12:
        raise ValueError("convex regime requires gamma >= 1.5/mu")
    const = 1.5 / mu
    stages = _build(lambda e: 9.0 * sigma2 / (2.0 * mu * e * alpha), const, n, eps0,
                    eta_cap=1.0 / smoothness)
    return StageSchedule("convex", eps0, target_eps, mu, gamma, alpha=alpha,
                         sigma2=sigma2, smoothness=smoothness,
                         return_op="average", stages=stages)


def quasi_convex_schedule(eps0, target_eps, mu, lipschitz, theta, gamma=None):
    """eta_k = 2 eps_k theta / (3 G^2), T_k = 9 G^2 / (4 mu eps_k theta^2),
    gamma >= 1.5/(theta mu), randomly sampled stage returns."""
    if lipschitz <= 0 or theta <= 0:
        raise ValueError("quasi-convex regime needs G > 0 and theta > 0")
    n = _n_stages(eps0, target_eps)
    if gamma is None:
        gamma = 1.5 / (theta * mu)
    if np.isfinite(gamma) and gamma < 1.5 / (theta * mu) - 1e-12:
        raise ValueError("quasi-convex regime requires gamma >= 1.5/(theta mu)")
    const = 1.5 / (theta * mu)
    g2 = lipschitz * lipschitz
    stages = _build(lambda e: 9.0 * g2 / (4.0 * mu * e * theta * theta), const, n, eps0)
    return StageSchedule("quasi_convex", eps0, target_eps, mu, gamma, theta=theta,
                         lipschitz=lipschitz, return_op="random_iterate", stages=stages)


def weakly_convex_schedule(eps0, target_eps, mu, sigma2, smoothness, alpha=None):
    """gamma = 4/mu, eta_k = eps_k alpha / (4 sigma^2) <= 1/L,
    T_k = 4 sigma^2 / (mu eps_k alpha), averaged stage returns."""
    if sigma2 <= 0:
        raise ValueError("weakly convex regime needs sigma2 > 0")
    n = _n_stages(eps0, target_eps)
    if alpha is None:
        alpha = min(1.0, 2.0 * sigma2 / (eps0 * smoothness))
    gamma = 4.0 / mu
    const = 1.0 / mu
    stages = _build(lambda e: 4.0 * sigma2 / (mu * e * alpha), const, n, eps0,
                    eta_cap=1.0 / smoothness)
    return StageSchedule("weakly_convex", eps0, target_eps, mu, gamma, alpha=alpha,
                         sigma2=sigma2, smoothness=smoothness,
                         return_op="average", stages=stages)
