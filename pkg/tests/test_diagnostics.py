import json

import numpy as np
import pytest

from stagewise.core import RngStream, dataset_from_examples, sparse_example
from stagewise.data_io import gen_classification
from stagewise.diagnostics import (ReferenceSolution, compute_reference,
                                   hessian_vector_product, lanczos_min_eig,
                                   lanczos_smallest, load_or_compute_reference,
                                   mu_ratio, probe_points, probe_trajectory,
                                   theta_ratio)
from stagewise.geometry import unconstrained
from stagewise.losses import (QuadraticProblem, empirical_risk, fit_constants,
                              full_gradient, logistic, make_quadratic_synthetic)
from stagewise.optim import sgd_run
from stagewise.schedules import constant


def _plain_quadratic(eigs, d):
    """Quadratic with an identity rotation (no reflections)."""
    prob = QuadraticProblem(np.array(eigs, float), np.zeros(d), 0, np.empty((0, d)))
    from stagewise.losses import quadratic_loss
    model = quadratic_loss(prob)
    ds = dataset_from_examples(
        [sparse_example(0.0, []) for _ in range(3)], dim=d)
    return model, ds, prob


def test_theta_ratio_quadratic_hand_value():
    model, ds, prob = _plain_quadratic([1.0, 4.0], 2)
    ref = ReferenceSolution(prob.minimizer, 0.0, "analytic")
    w = prob.minimizer + np.array([1.0, 1.0])
    assert theta_ratio(model, ds, w, ref) == pytest.approx(2.0, rel=1e-12)


def test_theta_is_two_on_rotated_quadratics():
    model, ds = make_quadratic_synthetic(7, 5, 0.02, 1.5, 0.0, seed=9)
    ref = ReferenceSolution(model.quad.minimizer, 0.0, "analytic")
    rng = np.random.default_rng(2)
    for _ in range(50):
        w = model.quad.minimizer + rng.standard_normal(7) * rng.choice([0.1, 1, 10])
        assert theta_ratio(model, ds, w, ref) == pytest.approx(2.0, rel=1e-10)


def test_theta_at_least_one_for_convex_loss_at_exact_optimum():
    ds = gen_classification(6, 40, 3, seed=5, margin=0.1, flip=0.2)
    m = fit_constants(logistic(), ds, None)
    # drive the full-gradient method to a near-exact optimum
    w = np.zeros(6)
    for _ in range(8000):
        w -= (1.0 / m.smoothness) * full_gradient(m, w, ds)
    assert np.linalg.norm(full_gradient(m, w, ds)) < 1e-12
    ref = ReferenceSolution(w, empirical_risk(m, w, ds), "gd")
    rng = np.random.default_rng(3)
    for _ in range(50):
        probe = w + rng.standard_normal(6)
        assert theta_ratio(m, ds, probe, ref) >= 1 - 1e-8


def test_theta_floor_guard():
    model, ds, prob = _plain_quadratic([1.0, 1.0], 2)
    ref = ReferenceSolution(prob.minimizer, 0.0, "analytic")
    with pytest.raises(ValueError, match="floor"):
        theta_ratio(model, ds, prob.minimizer + 1e-9, ref)


def test_mu_ratio_values():
    model, ds, prob = _plain_quadratic([1.0, 4.0], 2)
    ref = ReferenceSolution(prob.minimizer, 0.0, "analytic")
    w = prob.minimizer + np.array([1.0, 1.0])
    assert mu_ratio(model, ds, w, ref) == pytest.approx(2.5 / 4.0, rel=1e-12)
    # Rayleigh bounds over random probes
    rng = np.random.default_rng(4)
    for _ in range(100):
        w = prob.minimizer + rng.standard_normal(2)
        r = mu_ratio(model, ds, w, ref)
        assert 1.0 / 4 - 1e-12 <= r <= 4.0 / 4 + 1e-12


def test_mu_ratio_isotropic_exact():
    model, ds, prob = _plain_quadratic([0.3, 0.3, 0.3], 3)
    ref = ReferenceSolution(prob.minimizer, 0.0, "analytic")
    rng = np.random.default_rng(5)
    for _ in range(20):
        w = prob.minimizer + rng.standard_normal(3)
        assert mu_ratio(model, ds, w, ref) == pytest.approx(0.3 / 4, rel=1e-12)


def test_hvp_exact_on_quadratic_and_linear_in_v():
    model, ds = make_quadratic_synthetic(6, 5, 0.05, 2.0, 0.0, seed=7)
    H = model.quad.hessian_dense()
    rng = np.random.default_rng(6)
    w = rng.standard_normal(6)
    v = rng.standard_normal(6)
    got = hessian_vector_product(model, ds, w, v)
    assert np.allclose(got, H @ v, rtol=1e-6, atol=1e-10)
    got2 = hessian_vector_product(model, ds, w, 2 * v)
    assert np.allclose(got2, 2 * got, rtol=1e-6)


def test_hvp_matches_analytic_logistic_hessian():
    ds = gen_classification(8, 30, 4, seed=8, margin=0.1, flip=0.1)
    m = logistic()
    rng = np.random.default_rng(7)
    X = np.zeros((ds.n, ds.dim))
    for i in range(ds.n):
        z = ds.example(i)
        X[i, z.indices] = z.values
    y = ds.labels
    for _ in range(10):
        w = rng.standard_normal(8) * 0.5
        v = rng.standard_normal(8)
        margins = y * (X @ w)
        s = 1.0 / (1.0 + np.exp(margins))
        H = (X.T * (s * (1 - s))) @ X / ds.n
        got = hessian_vector_product(m, ds, w, v)
        assert np.linalg.norm(got - H @ v) <= 1e-4 * np.linalg.norm(H @ v)


def test_hvp_rejects_zero_direction():
    model, ds = make_quadratic_synthetic(3, 4, 0.1, 1.0, 0.0, seed=1)
    with pytest.raises(ValueError):
        hessian_vector_product(model, ds, np.zeros(3), np.zeros(3))


def test_lanczos_exact_small_operator():
    diag = np.array([-2.0, 1.0, 3.0])
    est, broke = lanczos_smallest(lambda v: diag * v, 3, 3, RngStream(0))
    assert est == pytest.approx(-2.0, abs=1e-10)
    assert not broke


def test_lanczos_matches_dense_eigensolver():
    rng = np.random.default_rng(10)
    for trial in range(5):
        a = rng.standard_normal((50, 50))
        a = 0.5 * (a + a.T)
        lam = np.linalg.eigvalsh(a)[0]
        est, broke = lanczos_smallest(lambda v: a @ v, 50, 50, RngStream(trial))
        assert abs(est - lam) <= 1e-6 * abs(lam)


def test_lanczos_monotone_in_iterations():
    rng = np.random.default_rng(12)
    for trial in range(20):
        a = rng.standard_normal((30, 30))
        a = 0.5 * (a + a.T)
        prev = np.inf
        for iters in (3, 6, 12, 24, 30):
            est, _ = lanczos_smallest(lambda v: a @ v, 30, iters, RngStream(trial))
            assert est <= prev + 1e-9
            prev = est


def test_lanczos_positive_definite_stays_nonnegative():
    model, ds = make_quadratic_synthetic(12, 4, 0.2, 2.0, 0.0, seed=13)
    est, _ = lanczos_min_eig(model, ds, np.zeros(12), 12, RngStream(3))
    assert est >= 0.2 - 1e-6


def test_lanczos_breakdown_flag():
    u = np.zeros(8)
    u[0] = 1.0
    est, broke = lanczos_smallest(lambda v: u * np.dot(u, v), 8, 8, RngStream(2))
    assert broke
    assert est <= 1e-9  # rank-1 PSD operator has smallest eigenvalue 0


def test_lanczos_iter_validation():
    with pytest.raises(ValueError):
        lanczos_smallest(lambda v: v, 4, 1, RngStream(0))


def test_compute_reference_quadratic():
    model, ds = make_quadratic_synthetic(20, 10, 0.05, 1.0, 0.0, seed=3)
    m = fit_constants(model, ds, None, sigma_at=[np.zeros(20)])
    eps0 = empirical_risk(m, np.zeros(20), ds)
    ref = compute_reference(m, ds, unconstrained(), budget=100_000, rng=RngStream(5))
    assert ref.f_star <= 1e-8 * eps0
    assert ref.f_star <= eps0
    blob = json.dumps(ref.to_json())
    back = ReferenceSolution.from_json(json.loads(blob))
    assert back.provenance == ref.provenance
    assert np.array_equal(back.w_star, ref.w_star)


def test_reference_cache_roundtrip(tmp_path):
    model, ds = make_quadratic_synthetic(8, 6, 0.1, 1.0, 0.0, seed=4)
    m = fit_constants(model, ds, None, sigma_at=[np.zeros(8)])
    a = load_or_compute_reference(tmp_path, "hash123", m, ds, unconstrained(),
                                  2000, RngStream(1))
    b = load_or_compute_reference(tmp_path, "hash123", m, ds, unconstrained(),
                                  2000, RngStream(999))  # cache hit ignores rng
    assert np.array_equal(a.w_star, b.w_star)
    assert len(list(tmp_path.glob("ref_*.json"))) == 1


def test_reference_rejects_undercutting_probe():
    ref = ReferenceSolution(np.zeros(2), 1.0, "bogus")
    with pytest.raises(ValueError, match="rejected"):
        ref.validate_probe(0.5)


def test_one_point_strong_convexity_identity_on_quadratics():
    model, ds = make_quadratic_synthetic(5, 4, 0.1, 2.0, 0.0, seed=21)
    q = model.quad
    rng = np.random.default_rng(9)
    for _ in range(100):
        w = q.minimizer + rng.standard_normal(5)
        gap = empirical_risk(model, w, ds)
        g = full_gradient(model, w, ds)
        lhs = min(float(np.dot(g, g)), float(np.dot(g, w - q.minimizer)))
        assert lhs >= (2 * q.mu / q.smoothness) * gap * (1 - 1e-10)


def test_probe_trajectory_smoke():
    model, ds = make_quadratic_synthetic(6, 8, 0.05, 1.0, 1e-3, seed=2)
    m = fit_constants(model, ds, None, sigma_at=[np.zeros(6)])
    snaps = []
    sgd_run(m, ds, unconstrained(), constant(0.2), np.ones(6), 400, RngStream(4),
            eval_every=2, on_eval=lambda c, w: snaps.append((c, w)))
    pts = probe_points(snaps, count=200)
    assert len(pts) == 200
    ref = ReferenceSolution(m.quad.minimizer, 0.0, "analytic")
    report = probe_trajectory(m, ds, unconstrained(), pts, ref,
                              hvp_probes={0, 100}, lanczos_iters=6,
                              rng=RngStream(5))
    assert len(report.probes) == 200
    thetas = report.theta_values()
    assert thetas.size and np.all(np.isfinite(thetas)) and np.all(thetas > 0)
    assert len(report.rho_estimates) == 2
    summary = report.summary()
    assert summary["theta_median"] == pytest.approx(2.0, rel=1e-8)
