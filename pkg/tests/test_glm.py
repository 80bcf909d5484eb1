import numpy as np
import pytest

from defuse.errors import NonConvergence, SingularJacobian
from defuse.glm import fit_glm, mean_deriv, mean_fn


def test_identity_link_is_weighted_least_squares():
    rng = np.random.default_rng(0)
    a = np.column_stack([np.ones(100), rng.normal(size=(100, 2))])
    y = rng.normal(size=100)
    w = rng.uniform(0.5, 2.0, size=100)
    expected = np.linalg.solve(a.T @ (w[:, None] * a), a.T @ (w * y))
    np.testing.assert_allclose(fit_glm(a, y, "identity", weights=w), expected, atol=1e-10)


def test_logit_score_vanishes_at_solution():
    rng = np.random.default_rng(1)
    a = np.column_stack([np.ones(500), rng.normal(size=(500, 3))])
    y = (rng.uniform(size=500) < mean_fn("logit", a @ np.array([0.2, 1.0, -0.5, 0.0]))).astype(float)
    g = fit_glm(a, y, "logit")
    np.testing.assert_allclose(a.T @ (y - mean_fn("logit", a @ g)), 0.0, atol=1e-8)


def test_penalty_shrinks_towards_zero():
    rng = np.random.default_rng(2)
    a = np.column_stack([np.ones(200), rng.normal(size=(200, 2))])
    y = (rng.uniform(size=200) < 0.5).astype(float)
    free = fit_glm(a, y, "logit")
    tight = fit_glm(a, y, "logit", penalty=np.array([0.0, 1e3, 1e3]))
    assert np.all(np.abs(tight[1:]) < np.abs(free[1:]))


def test_mean_derivative_matches_finite_difference():
    eta = np.linspace(-4, 4, 9)
    for link in ("identity", "logit"):
        fd = (mean_fn(link, eta + 1e-6) - mean_fn(link, eta - 1e-6)) / 2e-6
        np.testing.assert_allclose(mean_deriv(link, eta), fd, atol=1e-7)


def test_iteration_cap_raises():
    rng = np.random.default_rng(3)
    a = np.column_stack([np.ones(300), rng.normal(size=(300, 2))])
    y = (rng.uniform(size=300) < mean_fn("logit", a @ np.array([0.5, 2.0, -2.0]))).astype(float)
    with pytest.raises(NonConvergence):
        fit_glm(a, y, "logit", max_iter=1)


def test_collinear_design_is_singular():
    a = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(SingularJacobian):
        fit_glm(a, np.arange(10.0), "identity")
