import numpy as np
import pytest

from sustain.oracle import ProblemConstants
from sustain.testbed import QuadBilevelSpec, make_quadratic, random_quadratic_spec


@pytest.fixture
def unit_constants():
    """mu_g=1, L_g=2, every other regularity constant 1."""
    return ProblemConstants(
        mu_g=1.0, L_g=2.0, C_gxy=1.0, C_fy=1.0,
        L_fx=1.0, L_fy=1.0, L_gxy=1.0, L_gyy=1.0,
    )


@pytest.fixture
def onedim_quad():
    """1-d lower objective y^2 - x*y (Hessian 2), outer 0.5*y^2."""
    spec = QuadBilevelSpec(
        A=np.array([[2.0]]), B=np.array([[1.0]]), b=np.zeros(1),
        y_target=np.zeros(1), lam=0.0,
    )
    return make_quadratic(spec, rng_seed=0)


@pytest.fixture
def quad5():
    """Deterministic 5-d instance with spectrum pinned to [1, 2]."""
    rng = np.random.default_rng(42)
    spec = random_quadratic_spec(rng, d_up=2, d_lo=5, mu_g=1.0, L_g=2.0, lam=0.5)
    return make_quadratic(spec, rng_seed=0)


@pytest.fixture
def quad5_noisy():
    rng = np.random.default_rng(43)
    spec = random_quadratic_spec(
        rng, d_up=2, d_lo=5, mu_g=1.0, L_g=2.0, lam=0.5,
        sigma_f=0.3, sigma_g=0.3,
    )
    return make_quadratic(spec, rng_seed=1)
