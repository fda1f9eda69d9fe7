import json
import os
import subprocess
import sys

import numpy as np
import pytest

from stagewise import _kernels as K
from stagewise.core import RngStream
from stagewise.losses import empirical_risk, make_quadratic_synthetic
from stagewise.geometry import unconstrained
from stagewise.optim import sgd_run
from stagewise.schedules import poly_one_over_t

_CROSS_SCRIPT = r"""
import json, sys
import numpy as np
from stagewise import _kernels as K
from stagewise.core import RngStream
from stagewise.losses import empirical_risk, make_quadratic_synthetic
from stagewise.geometry import unconstrained
from stagewise.optim import sgd_run
from stagewise.schedules import poly_one_over_t

assert not K.USING_NUMBA, "fallback backend expected"
model, ds = make_quadratic_synthetic(8, 16, 0.05, 1.0, 1e-2, seed=3)
rec = sgd_run(model, ds, unconstrained(), poly_one_over_t(0.05), np.zeros(8), 400,
              RngStream(11))
draws = RngStream(7).peek_block(64, 13)
print(json.dumps({
    "final_w": rec.final_w.tolist(),
    "risk": empirical_risk(model, rec.final_w, ds),
    "draws": draws.tolist(),
}))
"""


def test_mix_function_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(300):
        seed = int(rng.integers(0, 2**63 - 1))
        counter = int(rng.integers(0, 2**62))
        n = int(rng.integers(1, 10**6))
        assert int(K.draw_at(seed, counter, n)) == K.draw_at_py(seed, counter, n)


def test_block_draws_match_scalar_draws():
    block = K.draw_block(123, 40, 500, 17)
    singles = [int(K.draw_at(123, 40 + i, 17)) for i in range(500)]
    assert block.tolist() == singles


def test_loss_scalars_match_formulas():
    rng = np.random.default_rng(1)
    for _ in range(200):
        y = float(rng.choice([-1.0, 1.0]))
        z = float(rng.standard_normal() * 3)
        assert K.loss_scalar(K.SQUARED_HINGE, y, z, 0.0) == max(0.0, 1 - y * z) ** 2
        assert K.loss_scalar(K.SQUARE, y, z, 0.0) == (y - z) ** 2
        r = y - z
        want = 0.5 * r * r if abs(r) <= 1.0 else abs(r) - 0.5
        assert K.loss_scalar(K.HUBER, y, z, 1.0) == pytest.approx(want, rel=1e-15)
        assert K.loss_scalar(K.LOGISTIC, y, z, 0.0) == pytest.approx(
            np.log1p(np.exp(-y * z)), rel=1e-12)


def test_logistic_extreme_margins_are_stable():
    assert np.isfinite(K.loss_scalar(K.LOGISTIC, 1.0, -800.0, 0.0))
    assert K.loss_scalar(K.LOGISTIC, 1.0, 800.0, 0.0) == pytest.approx(0.0, abs=1e-300)
    assert K.dloss_scalar(K.LOGISTIC, 1.0, 800.0, 0.0) == pytest.approx(0.0, abs=1e-300)
    assert K.dloss_scalar(K.LOGISTIC, 1.0, -800.0, 0.0) == -1.0


@pytest.mark.skipif(not K.USING_NUMBA, reason="already running the fallback")
def test_numpy_fallback_agrees_with_numba():
    env = dict(os.environ, STAGEWISE_BACKEND="numpy")
    out = subprocess.run([sys.executable, "-c", _CROSS_SCRIPT], env=env,
                         capture_output=True, text=True, timeout=600)
    assert out.returncode == 0, out.stderr
    got = json.loads(out.stdout)

    model, ds = make_quadratic_synthetic(8, 16, 0.05, 1.0, 1e-2, seed=3)
    rec = sgd_run(model, ds, unconstrained(), poly_one_over_t(0.05), np.zeros(8),
                  400, RngStream(11))
    assert got["draws"] == RngStream(7).peek_block(64, 13).tolist()
    assert np.allclose(rec.final_w, got["final_w"], rtol=1e-9, atol=1e-12)
    assert empirical_risk(model, rec.final_w, ds) == pytest.approx(got["risk"], rel=1e-9)


def test_backend_flag_is_validated():
    env = dict(os.environ, STAGEWISE_BACKEND="cuda")
    out = subprocess.run([sys.executable, "-c", "import stagewise"], env=env,
                         capture_output=True, text=True, timeout=120)
    assert out.returncode != 0
    assert "STAGEWISE_BACKEND" in out.stderr
