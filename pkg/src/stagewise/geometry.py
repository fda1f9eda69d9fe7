"""Feasible sets, Euclidean projections, and the anchored proximal step."""

from dataclasses import dataclass

import numpy as np

from . import _kernels as K

_SET_CODE = {"unconstrained": K.UNCONSTRAINED, "l1_ball": K.L1_BALL, "l2_ball": K.L2_BALL}


@dataclass(frozen=True)
class FeasibleSet:
    kind: str
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in _SET_CODE:
            raise ValueError("unknown feasible set kind %r" % self.kind)
        if self.kind != "unconstrained" and self.radius <= 0:
            raise ValueError("ball radius must be positive")

    @property
    def code(self):
        return _SET_CODE[self.kind]


def unconstrained():
    return FeasibleSet("unconstrained")


def l1_ball(radius):
    return FeasibleSet("l1_ball", float(radius))


def l2_ball(radius):
    return FeasibleSet("l2_ball", float(radius))


def project(feasible, v):
    """argmin_{u in set} ||u - v||; the l1 ball uses the sorted-threshold method."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a non-finite vector")
    if feasible.kind == "unconstrained":
        return v.copy()
    out = v.copy()
    if feasible.kind == "l1_ball":
        K.project_l1(out, feasible.radius)
    else:
        K.project_l2(out, feasible.radius)
    return out


def prox_step(feasible, w, anchor, g, eta, gamma):
    """One anchored proximal step, then projection.

    Closed-form minimizer of  g.u + ||u - w||^2/(2 eta) + ||u - anchor||^2/(2 gamma):
    (gamma w + eta anchor - eta gamma g) / (eta + gamma). gamma = inf is the
    explicit no-regularization variant and reproduces the plain step w - eta g
    without rounding drift.
    """
    if eta <= 0:
        raise ValueError("step size must be positive")
    if gamma <= 0:
        raise ValueError("gamma must be positive (or inf)")
    w = np.asarray(w, dtype=np.float64)
    if np.isinf(gamma):
        u = w - eta * np.asarray(g, dtype=np.float64)
    else:
        u = (gamma * w + eta * np.asarray(anchor, float) - eta * gamma * np.asarray(g, float)) / (eta + gamma)
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite proximal step")
    return project(feasible, u)
