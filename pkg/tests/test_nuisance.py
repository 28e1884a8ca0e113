import warnings

import numpy as np
import pytest

from coarse_snmm import (BlipParams, CovarianceWorkingModel, LongitudinalDataset, SimulationConfig, builtin_blip,
                         delta_vector, estimate_gamma, fit_duration_two_part, fit_h_regression,
                         homoscedasticity_diagnostic, simulate)
from coarse_snmm._glm import fit_wls
from coarse_snmm.blip import h_design
from coarse_snmm.nuisance import DurationFit, HRegressionFit
from coarse_snmm.rows import Rows, features, outcome_at, window_rows

B2 = builtin_blip("two_param")
B3 = builtin_blip("three_param")
PSI = np.array([25.0, -0.7])


def test_intercept_only_plugin_is_mean(cohort_500):
    ds = cohort_500.observed
    fit = fit_h_regression(ds, B2, BlipParams(PSI), ("1",))
    rows = window_rows(ds)
    H = outcome_at(ds, rows.pid, rows.k) - h_design(B2, ds, rows.pid, rows.k) @ PSI
    assert fit.coef[0] == pytest.approx(H.mean(), rel=1e-12)


def test_symbolic_equals_plugin(cohort_500):
    ds = cohort_500.observed
    feats = ("1", "cd4", "k_minus_m", "injdrug", "cd4*m")
    sym = fit_h_regression(ds, B2, None, feats)
    rows = window_rows(ds)
    rng = np.random.default_rng(0)
    for _ in range(3):
        psi = rng.normal(size=2) * 10
        plug = fit_h_regression(ds, B2, BlipParams(psi), feats)
        a = sym.centered(ds, rows, psi)
        b = plug.centered(ds, rows, psi)
        assert np.max(np.abs(a - b)) < 1e-10 * max(1.0, np.max(np.abs(b)))


def test_wls_normal_equations(cohort_500):
    ds = cohort_500.observed
    rows = window_rows(ds)
    X = features(ds, rows, ("1", "cd4", "k_minus_m", "cd4^2"))
    y = outcome_at(ds, rows.pid, rows.k)
    w = np.random.default_rng(1).uniform(0.5, 2, len(y))
    beta = fit_wls(X, y, w).coef
    lhs = X.T @ (w * (y - X @ beta))
    assert np.max(np.abs(lhs)) < 1e-8 * np.max(np.abs(X.T @ (w * y)))


def test_null_effect_regression_recovers_truth():
    c = simulate(SimulationConfig(n=20_000, seed=13, psi_true=(0.0, 0.0)))
    fit = fit_h_regression(c.observed, B2, BlipParams([0.0, 0.0]), ("1", "cd4", "k_minus_m"))
    assert fit.coef[1] == pytest.approx(1.0, abs=0.01)
    assert fit.coef[2] == pytest.approx(-10.0, abs=0.5)


def test_rank_deficient_h_regression_names_columns(cohort_500):
    from coarse_snmm._glm import FitError
    with pytest.raises(FitError, match="k_minus_m"):
        fit_h_regression(cohort_500.observed, B2, BlipParams(PSI), ("1", "k_minus_m", "k_minus_m_1"))


# -- duration -------------------------------------------------------------------


def test_no_initiators_predicts_zero():
    y = np.full((4, 15), 300.0)
    ds = LongitudinalDataset.from_arrays(y, {}, treatment_month=[19] * 4, K=18, first_month=6)
    with pytest.warns(UserWarning, match="no treatment initiations"):
        fit = fit_duration_two_part(ds, B2, ("1",))
    rows = window_rows(ds, untreated_through="m")
    assert np.all(fit.predict(ds, rows) == 0)


def test_all_initiate_next_month():
    # everyone untreated through 6 starts at 7: Tr(6, k) = k - 7 deterministically
    y = np.full((5, 25), 300.0)
    ds = LongitudinalDataset.from_arrays(y, {}, treatment_month=[7] * 5, K=18, first_month=6)
    for k in (9, 14, 18):
        rows = Rows(np.arange(5), np.full(5, 6), np.full(5, k))
        fit = fit_duration_two_part(ds, B2, ("1",), rows=rows)
        pred = fit.predict(ds, rows)
        np.testing.assert_allclose(pred[:, 0], k - 6 - 1, atol=1e-10)
        np.testing.assert_allclose(pred[:, 1], 7 * (k - 7), atol=1e-9)


def test_structural_zero_rows():
    fit = DurationFit(("1",), None, np.ones((1, 2)), 2, always=True)
    y = np.full((2, 25), 300.0)
    ds = LongitudinalDataset.from_arrays(y, {}, treatment_month=[19, 19], K=18, first_month=6)
    rows = Rows(np.array([0, 0, 0]), np.array([6, 6, 18]), np.array([7, 8, 20]))
    np.testing.assert_array_equal(fit.predict(ds, rows), [[0, 0], [1, 1], [0, 0]])


class _Stub:
    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    def predict(self, ds, rows, X=None):
        return np.tile(self.value, (len(rows), 1))


def _one_row_ds():
    y = np.full((1, 25), 300.0)
    return LongitudinalDataset.from_arrays(y, {}, treatment_month=[19], K=18, first_month=6)


def test_delta_example():
    ds = _one_row_ds()
    rows = Rows(np.array([0]), np.array([6]), np.array([18]))
    np.testing.assert_allclose(delta_vector(_Stub([2.0, 16.0, 130.0]), B3, ds, rows)[0], [10, 56, 302])


def test_delta_zero_hazard_and_next_month_hazard():
    ds = _one_row_ds()
    rows = Rows(np.array([0, 0]), np.array([6, 9]), np.array([18, 15]))
    zero = DurationFit(("1",), None, None, 3)
    np.testing.assert_allclose(delta_vector(zero, B3, ds, rows), [[12, 72, 432], [6, 54, 486]])
    # hazard 1 at m+1: Tr(m,k) = k-m-1, so the first entry is 1
    nxt = _Stub([18 - 6 - 1, 0, 0])
    one = Rows(np.array([0]), np.array([6]), np.array([18]))
    assert delta_vector(nxt, B3, ds, one)[0, 0] == 1


def test_duration_matches_empirical_mean():
    c = simulate(SimulationConfig(n=20_000, seed=17))
    ds = c.observed
    m, k = 8, 20
    risk = np.flatnonzero(ds.treatment_month > m)
    rows = Rows(risk, np.full(len(risk), m), np.full(len(risk), k))
    fit = fit_duration_two_part(ds, B2, ("1", "cd4", "injdrug"), rows=rows)
    pred = fit.predict(ds, rows).mean(axis=0)
    D = h_design(B2, ds, risk, np.full(len(risk), k))
    mcse = D.std(axis=0, ddof=1) / np.sqrt(len(risk))
    assert np.all(np.abs(pred - D.mean(axis=0)) < 3 * mcse)


def test_duration_frequency_weights(cohort_500):
    ds = cohort_500.observed
    w = np.ones(ds.n)
    w[:100] = 2
    idx = np.r_[np.arange(ds.n), np.arange(100)]
    feats = ("1", "cd4", "m", "k_minus_m_1")
    a = fit_duration_two_part(ds, B2, feats, weights=w)
    b = fit_duration_two_part(ds.subset(idx), B2, feats)
    np.testing.assert_allclose(a.coef, b.coef, rtol=1e-8)
    np.testing.assert_allclose(a.hurdle.coef, b.hurdle.coef, rtol=1e-6)


# -- working covariance -------------------------------------------------------------


def _gamma_ds(yA, yB):
    y = np.array([[0.0, *yA], [0.0, *yB]])
    return LongitudinalDataset.from_arrays(y, {}, treatment_month=[1, 1], K=0, window=2)


ZERO_FIT = HRegressionFit(("1",), np.array([0.0]), "plugin", np.zeros(2))


def test_gamma_example():
    ds = _gamma_ds((1.0, 2.0), (-1.0, -2.0))
    g = estimate_gamma(ds, B2, np.zeros(2), ZERO_FIT).matrix(0)
    assert g[0, 1] == 2.0 and g[1, 0] == 2.0
    np.testing.assert_array_equal(np.diag(g), [1.0, 4.0])


def test_gamma_zero_residuals():
    ds = _gamma_ds((0.0, 0.0), (0.0, 0.0))
    np.testing.assert_array_equal(estimate_gamma(ds, B2, np.zeros(2), ZERO_FIT).matrix(0), np.zeros((2, 2)))


def test_gamma_identity_mode():
    ds = _gamma_ds((1.0, 2.0), (-1.0, -2.0))
    np.testing.assert_array_equal(estimate_gamma(ds, B2, np.zeros(2), ZERO_FIT, "identity").matrix(0), np.eye(2))
    np.testing.assert_array_equal(CovarianceWorkingModel.identity(3).matrix(7), np.eye(3))


def test_gamma_sparse_fallback():
    y = np.array([[0.0, 1.0, 2.0]])
    ds = LongitudinalDataset.from_arrays(y, {}, treatment_month=[1], K=0, window=2)
    with pytest.warns(UserWarning, match="fewer than 2"):
        g = estimate_gamma(ds, B2, np.zeros(2), ZERO_FIT).matrix(0)
    assert g[0, 1] == 0.0


def test_gamma_properties_and_homoscedasticity(cohort_2000):
    ds = cohort_2000.observed
    h = fit_h_regression(ds, B2, BlipParams(PSI), ("1", "cd4", "k_minus_m"))
    gamma = estimate_gamma(ds, B2, PSI, h)
    for m in ds.decision_months():
        g = gamma.matrix(m)
        np.testing.assert_array_equal(g, g.T)
        assert np.all(np.diag(g) >= 0)
        assert np.linalg.eigvalsh(g)[0] > -1e-8 * np.abs(g).max()
    lag = estimate_gamma(ds, B2, PSI, h, pooling="lag")
    np.testing.assert_allclose(lag.matrix(6), lag.matrix(12))
    diag = homoscedasticity_diagnostic(ds, B2, PSI, h, gamma)
    assert abs(diag["coef"]) < 3 * diag["se"]


def test_gamma_close_to_truth():
    """Empirical Gamma at psi* with the true regression matches sum of noise variances."""
    from oracles import true_gamma
    c = simulate(SimulationConfig(n=20_000, seed=19))
    ds = c.observed
    h = HRegressionFit(("cd4", "k_minus_m"), np.array([1.0, -10.0]), "plugin", PSI)
    g = estimate_gamma(ds, B2, PSI, h)
    for m in (6, 12, 18):
        truth = true_gamma(c.config, m)
        assert np.max(np.abs(g.matrix(m) - truth) / truth) < 0.1
