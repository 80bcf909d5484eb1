import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defuse.data import LC, FusedDataset
from defuse.errors import FoldMismatch, FoldTooSmall
from defuse.nuisance import (DMLOperator, FeatureMap, NuisanceConfig, assign_folds, dml_transform,
                             fit_conditional_mean, fit_density_ratio, fit_nuisances, fit_ridge_fold,
                             make_fold_plan, quadratic_features)

from conftest import mcar_dataset, simulated


@given(n=st.integers(5, 400), K=st.integers(2, 5), seed=st.integers(0, 10**6))
def test_folds_are_balanced_and_reproducible(n, K, seed):
    a = assign_folds(n, K, seed)
    sizes = np.bincount(a, minlength=K)
    assert sizes.max() - sizes.min() <= 1 and sizes.min() >= 1
    np.testing.assert_array_equal(a, assign_folds(n, K, seed))


def test_folds_need_enough_rows():
    with pytest.raises(FoldTooSmall):
        assign_folds(3, 5, 0)


def test_plan_depends_on_seed_and_is_frozen(setting_one):
    plan = make_fold_plan(setting_one.dataset, K=5, seed=3)
    assert plan.lc.shape == (setting_one.dataset.n,)
    assert not np.array_equal(plan.lc, make_fold_plan(setting_one.dataset, K=5, seed=4).lc)
    assert not plan.lc.flags.writeable


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_dml_identity_without_alignment_covariates(seed):
    rng = np.random.default_rng(seed)
    n = 1000
    folds = assign_folds(n, 5, seed)
    op = DMLOperator(np.empty((n, 0)), folds, None, np.empty((50, 0)))
    d = rng.standard_cauchy(size=(n, 3))
    col, _, _ = dml_transform(op, d)
    assert np.array_equal(col, d)


def test_dml_operator_is_linear_in_response():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 2))
    folds = assign_folds(200, 5, 0)
    op = DMLOperator(x, folds, np.exp(0.3 * x[:, 0]), rng.normal(size=(500, 2)), "poly2", reference=x[:, 0] ** 2)
    d1, d2 = rng.normal(size=200), rng.normal(size=200)
    np.testing.assert_allclose(op.transform(2 * d1 - 3 * d2), 2 * op.transform(d1) - 3 * op.transform(d2),
                               atol=1e-10)


def test_dml_removes_functions_of_alignment_covariates():
    # For D = f(X) with f in the learner's span, D - m(X) vanishes and the
    # transform returns the UC plug-in mean of f.
    rng = np.random.default_rng(2)
    x = rng.normal(size=(300, 2))
    xu = rng.normal(loc=0.5, size=(2000, 2))
    op = DMLOperator(x, assign_folds(300, 5, 0), np.full(300, 1.7), xu, "linear")
    col = op.transform(1.0 + x @ np.array([2.0, -1.0]))
    np.testing.assert_allclose(col, 1.0 + xu.mean(axis=0) @ np.array([2.0, -1.0]), atol=1e-4)


def test_dml_rejects_wrong_length():
    op = DMLOperator(np.zeros((10, 0)), assign_folds(10, 2, 0), None, np.zeros((5, 0)))
    with pytest.raises(FoldMismatch):
        op.transform(np.zeros(9))


def test_quadratic_features_count_and_anchors():
    z = np.arange(12.0).reshape(3, 4)
    assert quadratic_features(z).shape[1] == 4 + 10
    anchored = quadratic_features(z, anchors=1)
    assert anchored.shape[1] == 4 + 4
    np.testing.assert_array_equal(anchored[:, 4:], z[:, :1] * z)


def test_smoother_weights_sum_to_one():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(80, 3))
    for learner in ("linear", "poly2", "krr"):
        fold, _ = fit_ridge_fold(x, learner, x[:, 0] + rng.normal(size=80))
        np.testing.assert_allclose(fold.weights(rng.normal(size=(7, 3))).sum(axis=1), 1.0, atol=1e-10)
        assert FeatureMap(learner, x)(x).shape[0] == 80


def test_cross_fitting_keeps_rows_out_of_their_own_fit():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(100, 2))
    y = x[:, 0] + rng.normal(size=100)
    folds = assign_folds(100, 5, 0)
    m1 = fit_conditional_mean(x, y, folds, "linear")
    y2 = y.copy()
    y2[0] += 100.0
    m2 = fit_conditional_mean(x, y2, folds, "linear")
    assert m1.oof[0] == pytest.approx(m2.oof[0], abs=1e-12)
    same_fold = folds == folds[0]
    np.testing.assert_allclose(m1.oof[same_fold], m2.oof[same_fold], atol=1e-12)
    assert not np.allclose(m1.oof[~same_fold], m2.oof[~same_fold])


def test_linear_learner_recovers_coefficients():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5000, 2))
    y = 0.5 + x @ np.array([1.5, -2.0]) + 0.1 * rng.normal(size=5000)
    m = fit_conditional_mean(x, y, assign_folds(5000, 2, 0), "linear")
    np.testing.assert_allclose(m.coef(0), [0.5, 1.5, -2.0], atol=0.02)


def test_forest_and_custom_learners_predict():
    from sklearn.linear_model import LinearRegression

    rng = np.random.default_rng(7)
    x = rng.normal(size=(120, 2))
    y = x[:, 0] ** 2
    folds = assign_folds(120, 3, 0)
    for learner in ("forest", LinearRegression()):
        m = fit_conditional_mean(x, y, folds, learner)
        assert m.predict(x[:4], 0).shape == (4,)


def test_density_ratio_is_one_without_alignment_set():
    ds = mcar_dataset(np.random.default_rng(0))
    plan = make_fold_plan(ds)
    assert np.all(fit_density_ratio(ds, LC, (), plan).oof == 1.0)


def test_density_ratio_tracks_a_mean_shift():
    rng = np.random.default_rng(8)
    n, N = 2000, 8000
    lc = rng.normal(size=(n, 1))
    uc = rng.normal(loc=0.5, size=(N, 1))
    ds = FusedDataset(("x",), (0,), lc, rng.normal(size=n), uc, omega0=(0,))
    model = fit_density_ratio(ds, LC, (0,), make_fold_plan(ds), eps_clip=0.0, penalty=1e-6)
    truth = np.exp(0.5 * lc[:, 0] - 0.125)
    assert np.corrcoef(np.log(model.oof), np.log(truth))[0, 1] > 0.98
    assert np.mean(model.oof) == pytest.approx(1.0, abs=0.05)


def test_ratios_are_clipped():
    sc = simulated("IV", n=200, N=2000, shift=1.0)
    nuis = fit_nuisances(sc.dataset, make_fold_plan(sc.dataset), NuisanceConfig(eps_clip=0.2))
    assert nuis.ratio_lc.oof.min() >= 0.2 and nuis.ratio_lc.oof.max() <= 5.0
