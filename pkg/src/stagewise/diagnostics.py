"""Empirical verification of the curvature assumptions.

Measures, at probe points along a training trajectory: the one-point
quasi-convexity ratio theta, the quadratic-growth ratio mu, and the smallest
Hessian eigenvalue via Lanczos on finite-difference Hessian-vector products
(a negative value estimates the weak-convexity parameter rho).
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RngStream
from .losses import empirical_risk, full_gradient
from .optim import variant_run

GAP_FLOOR = 1e-10


@dataclass(frozen=True)
class ReferenceSolution:
    w_star: np.ndarray
    f_star: float
    provenance: str

    def validate_probe(self, f_probe):
        if f_probe < self.f_star - 1e-12:
            raise ValueError(
                "probe risk %.17g undercuts the reference %.17g; reference rejected"
                % (f_probe, self.f_star)
            )

    def to_json(self):
        return {"w_star": self.w_star.tolist(), "f_star": self.f_star,
                "provenance": self.provenance}

    @staticmethod
    def from_json(obj):
        return ReferenceSolution(np.array(obj["w_star"], float), float(obj["f_star"]),
                                 str(obj["provenance"]))


@dataclass
class AssumptionReport:
    probes: list = field(default_factory=list)  # (probe_idx, cum_t, theta, mu, gap, dist2)
    rho_estimates: list = field(default_factory=list)  # (probe_idx, min_eig, iters, breakdown)

    def theta_values(self):
        return np.array([p[2] for p in self.probes if np.isfinite(p[2])])

    def mu_values(self):
        return np.array([p[3] for p in self.probes if np.isfinite(p[3])])

    def summary(self):
        th, mu = self.theta_values(), self.mu_values()
        return {
            "theta_min": float(th.min()) if th.size else float("nan"),
            "theta_median": float(np.median(th)) if th.size else float("nan"),
            "mu_min": float(mu.min()) if mu.size else float("nan"),
            "mu_median": float(np.median(mu)) if mu.size else float("nan"),
        }


def theta_ratio(m, ds, w, ref):
    """grad F_S(w) . (w - w*) / (F_S(w) - f*); gap must clear the floor."""
    w = np.asarray(w, float)
    f = empirical_risk(m, w, ds)
    ref.validate_probe(f)
    gap = f - ref.f_star
    if gap <= GAP_FLOOR:
        raise ValueError("risk gap %g below floor; theta undefined" % gap)
    g = full_gradient(m, w, ds)
    return float(np.dot(g, w - ref.w_star)) / gap


def mu_ratio(m, ds, w, ref):
    """(F_S(w) - f*) / (2 ||w - w*||^2); distance must clear the floor."""
    w = np.asarray(w, float)
    dist2 = float(np.dot(w - ref.w_star, w - ref.w_star))
    if dist2 <= GAP_FLOOR:
        raise ValueError("distance %g below floor; mu undefined" % dist2)
    f = empirical_risk(m, w, ds)
    ref.validate_probe(f)
    return (f - ref.f_star) / (2.0 * dist2)


def hessian_vector_product(m, ds, w, v):
    """Central finite difference of the full gradient along v.

    h = sqrt(machine eps) * (1 + ||w||) / ||v||, which keeps the estimate
    scale-consistent in v. Exact (up to rounding) on quadratics.
    """
    w = np.asarray(w, float)
    v = np.asarray(v, float)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        raise ValueError("direction must be nonzero")
    h = np.sqrt(np.finfo(float).eps) * (1.0 + np.linalg.norm(w)) / nv
    gp = full_gradient(m, w + h * v, ds)
    gm = full_gradient(m, w - h * v, ds)
    out = (gp - gm) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite Hessian-vector product")
    return out


def lanczos_smallest(matvec, dim, iters, rng, breakdown_tol=1e-12):
    """Smallest Ritz value of the Lanczos tridiagonalization of a symmetric
    operator, with full reorthogonalization.

    Returns (estimate, breakdown_flag). A breakdown (beta below tolerance)
    means the Krylov space closed early; the Ritz value so far is returned
    with the flag set.
    """
    if iters < 2:
        raise ValueError("lanczos needs iters >= 2")
    iters = min(iters, dim)
    q_basis = np.zeros((iters, dim))
    alphas = np.zeros(iters)
    betas = np.zeros(max(iters - 1, 1))
    v = np.array([rng.draw(2**53) / float(2**53) - 0.5 for _ in range(dim)])
    if np.linalg.norm(v) == 0.0:
        v[0] = 1.0
    q = v / np.linalg.norm(v)
    q_basis[0] = q
    u = matvec(q)
    alphas[0] = float(np.dot(q, u))
    r = u - alphas[0] * q
    broke = False
    k = 1
    for j in range(1, iters):
        r -= q_basis[:j].T @ (q_basis[:j] @ r)
        beta = np.linalg.norm(r)
        if beta < breakdown_tol:
            broke = True
            break
        betas[j - 1] = beta
        q = r / beta
        q_basis[j] = q
        u = matvec(q)
        alphas[j] = float(np.dot(q, u))
        r = u - alphas[j] * q
        k = j + 1
    tri = np.diag(alphas[:k])
    if k > 1:
        tri += np.diag(betas[:k - 1], 1) + np.diag(betas[:k - 1], -1)
    return float(np.linalg.eigvalsh(tri)[0]), broke


def lanczos_min_eig(m, ds, w, iters, rng):
    """Smallest Hessian eigenvalue estimate at w via finite-difference HVPs."""
    d = np.asarray(w, float).shape[0]
    return lanczos_smallest(lambda v: hessian_vector_product(m, ds, w, v), d, iters, rng)


def _default_reference_budget(budget):
    stages = max(4, min(10, budget // 2000)) if budget >= 8 else 1
    per = max(1, budget // stages)
    lengths = [per] * stages
    lengths[-1] += budget - per * stages
    return lengths


def compute_reference(m, ds, feasible, budget, rng, eta0=None, decay=0.5):
    """Long stagewise V1 run whose endpoint serves as the reference solution."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if eta0 is None:
        L = m.smoothness
        if L is None or L <= 0:
            raise ValueError("need a smoothness constant (fit_constants) or explicit eta0")
        eta0 = 0.5 / L
    lengths = _default_reference_budget(budget)
    w0 = np.zeros(ds.dim)
    rec = variant_run(m, ds, feasible, "V1", lengths, eta0, decay, np.inf, w0, rng)
    f_star = empirical_risk(m, rec.final_w, ds)
    prov = "variant=V1 budget=%d eta0=%.17g decay=%g seed=%d" % (budget, eta0, decay, rng.seed)
    return ReferenceSolution(rec.final_w, f_star, prov)


def reference_cache_key(ds_hash, loss_kind, feasible):
    raw = "%s|%s|%s|%.17g" % (ds_hash, loss_kind, feasible.kind, feasible.radius)
    return hashlib.sha256(raw.encode()).hexdigest()[:24]


def load_or_compute_reference(cache_dir, ds_hash, m, ds, feasible, budget, rng):
    """Disk-cached reference keyed by (dataset hash, loss kind, feasible set)."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / ("ref_%s.json" % reference_cache_key(ds_hash, m.kind, feasible))
    if path.exists():
        return ReferenceSolution.from_json(json.loads(path.read_text()))
    ref = compute_reference(m, ds, feasible, budget, rng)
    path.write_text(json.dumps(ref.to_json()))
    return ref


def probe_trajectory(m, ds, feasible, run_record_ws, ref, hvp_probes=(),
                     lanczos_iters=30, rng=None):
    """AssumptionReport over a list of (cum_t, w) probe points.

    Probes whose gap or distance sits below the numerical floor are recorded
    with NaN ratios (flagged, not dropped). hvp_probes selects probe indices
    for the Lanczos minimum-eigenvalue estimate.
    """
    report = AssumptionReport()
    for idx, (cum_t, w) in enumerate(run_record_ws):
        f = empirical_risk(m, w, ds)
        ref.validate_probe(f)
        gap = f - ref.f_star
        dist2 = float(np.dot(w - ref.w_star, w - ref.w_star))
        if gap > GAP_FLOOR:
            g = full_gradient(m, w, ds)
            theta = float(np.dot(g, w - ref.w_star)) / gap
        else:
            theta = float("nan")
        mu = gap / (2.0 * dist2) if dist2 > GAP_FLOOR else float("nan")
        report.probes.append((idx, int(cum_t), theta, mu, gap, dist2))
        if idx in hvp_probes:
            est, broke = lanczos_min_eig(m, ds, w, lanczos_iters,
                                         rng if rng is not None else RngStream(idx))
            report.rho_estimates.append((idx, est, lanczos_iters, int(broke)))
    return report


def probe_points(entries, count=200):
    """Evenly spaced probe selection over logged checkpoints (at most count)."""
    if len(entries) <= count:
        return list(entries)
    idx = np.linspace(0, len(entries) - 1, count).round().astype(int)
    return [entries[i] for i in sorted(set(idx.tolist()))]
