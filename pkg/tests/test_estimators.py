import numpy as np
import pytest

from coarse_snmm import (BlipParams, LongitudinalDataset, SimulationConfig, builtin_blip, simulate)
from coarse_snmm.estimators import (QFunction, SingularSystemError, assemble_system, naive_q, optimal_q_matrix,
                                    preliminary_q, solve_psi)
from coarse_snmm.nuisance import CovarianceWorkingModel, DurationFit, HRegressionFit
from coarse_snmm.pipeline import EstimatorConfig, Pipeline
from coarse_snmm.propensity import PooledLogisticModel
from coarse_snmm.rows import Rows, window_rows

from conftest import quiet, synthetic_dropout
from oracles import affine_from_grid, brute_force_G, lstsq_solution, projection_residual, true_center

B2 = builtin_blip("two_param")
B3 = builtin_blip("three_param")
PSI = np.array([25.0, -0.7])
THETA = (-2.4, -0.42, -0.0035, -0.026)
PROP_FEATURES = ("1", "injdrug", "cd4", "m")


def _single(y_m=400.0, idu=0.0, m=6):
    y = np.full((1, 25), y_m)
    ds = LongitudinalDataset.from_arrays(y, {"injdrug": np.full((1, 25), idu)}, treatment_month=[19], K=18,
                                         first_month=6)
    return ds, Rows(np.array([0]), np.array([m]), np.array([m + 12]))


# -- weight functions ----------------------------------------------------------------


def test_naive_q_examples():
    q = naive_q("a")
    ds, rows = _single(400.0, 0.0, 8)
    np.testing.assert_array_equal(q(ds, rows)[0], [400, 8, 0])
    ds, rows = _single(350.0, 1.0, 6)
    np.testing.assert_array_equal(naive_q("b")(ds, rows)[0], [350, 1, 350])
    off = Rows(np.array([0]), np.array([6]), np.array([10]))
    np.testing.assert_array_equal(q(ds, off)[0], [0, 0, 0])
    with pytest.raises(ValueError):
        naive_q("a", p=4)


def test_preliminary_q_zero_hazard():
    ds, _ = _single()
    rows = Rows(np.array([0, 0]), np.array([6, 10]), np.array([18, 22]))
    q = preliminary_q(DurationFit(("1",), None, None, 3), B3)
    np.testing.assert_allclose(q(ds, rows), [[12, 72, 432], [12, 120, 1200]])


def test_optimal_q_matrix_identity_and_scaled():
    D = np.arange(24.0).reshape(12, 2)
    np.testing.assert_allclose(optimal_q_matrix(np.eye(12), D), D)
    np.testing.assert_allclose(optimal_q_matrix(2 * np.eye(12), D), D / 2)
    with pytest.raises(ValueError):
        optimal_q_matrix(np.zeros((0, 0)), np.zeros((0, 2)))


def test_optimal_q_matrix_singular_gamma():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(4, 1))
    gamma = v @ v.T                                  # rank one
    D = rng.normal(size=(4, 3))
    Q = optimal_q_matrix(gamma, D)
    np.testing.assert_allclose(Q, lstsq_solution(gamma, D), atol=1e-10)
    # the residual of the least-squares solve is the part of D outside range(Gamma)
    assert np.linalg.norm(gamma @ Q - D) == pytest.approx(projection_residual(gamma, D), rel=1e-8)


def test_optimal_q_matrix_batch_matches_loop():
    rng = np.random.default_rng(1)
    L = rng.normal(size=(5, 5))
    gamma = L @ L.T
    D = rng.normal(size=(7, 5, 2))
    Q = optimal_q_matrix(gamma, D)
    for j in range(7):
        np.testing.assert_allclose(Q[j], np.linalg.solve(gamma, D[j]), atol=1e-9)


def test_q_function_rejects_non_finite():
    ds, rows = _single()
    q = QFunction(lambda ds, rows: np.full((len(rows), 2), np.nan), (12,), "bad")
    with pytest.raises(ValueError, match="non-finite"):
        q(ds, rows)


# -- estimating equations: closed-form cases -------------------------------------------


def _perfect_prop(ds, rows):
    return (ds.treatment_month[rows.pid] == rows.m).astype(float)


def test_perfect_propensity_gives_zero_system(cohort_500):
    ds = cohort_500.observed
    sys_ = assemble_system(ds, B2, _perfect_prop, naive_q("a", p=2))
    np.testing.assert_array_equal(sys_.A, 0)
    np.testing.assert_array_equal(sys_.b, 0)


def test_untreated_patient_contributes_no_slope(tiny):
    const = QFunction(lambda ds, rows: np.ones((len(rows), 2)), (1, 2))
    sys_ = assemble_system(tiny, B2, lambda ds, rows: np.full(len(rows), 0.3), const)
    np.testing.assert_array_equal(sys_.A_i[1], 0)    # never treated: H does not depend on psi
    assert np.any(sys_.A_i[0] != 0)


def test_no_initiators_is_unidentified():
    rng = np.random.default_rng(2)
    y = 300 + rng.normal(size=(30, 25))
    ds = LongitudinalDataset.from_arrays(y, {"injdrug": np.zeros((30, 25))}, treatment_month=[19] * 30, K=18,
                                         first_month=6)
    sys_ = assemble_system(ds, B2, lambda ds, rows: np.full(len(rows), 0.1), naive_q("a", p=2))
    with pytest.raises(SingularSystemError, match="unidentified"):
        solve_psi(sys_)


def test_unknown_form_and_missing_h():
    ds, _ = _single()
    with pytest.raises(ValueError):
        assemble_system(ds, B2, _perfect_prop, naive_q("a", p=2), form="H")
    with pytest.raises(ValueError, match="outcome regression"):
        assemble_system(ds, B2, _perfect_prop, naive_q("a", p=2), form="G_star")


# -- brute-force oracle on the two-patient dataset ---------------------------------------------


def _tiny_parts():
    offsets = {1: np.array([1.0, 0.5]), 2: np.array([-0.25, 2.0])}

    def q_vec(ds, rows):
        base = np.stack([offsets[d] for d in rows.k - rows.m])
        return base * (1 + ds.covariates["injdrug"][rows.pid, rows.m - ds.first_month])[:, None]

    def prop_vec(ds, rows):
        return 0.2 + 0.1 * rows.m + 0.05 * ds.covariates["injdrug"][rows.pid, rows.m - ds.first_month]

    def q_rec(rec, m, k):
        return offsets[k - m] * (1 + rec.row(m).covariates["injdrug"])

    def prop_rec(rec, m):
        return 0.2 + 0.1 * m + 0.05 * rec.row(m).covariates["injdrug"]

    coef = np.array([[3.0, 0.4, -0.1], [0.2, 0.01, 0.02]])      # symbolic fit on ("1", "cd4")
    h = HRegressionFit(("1", "cd4"), coef, "symbolic")

    def center(rec, m, k, psi):
        x = np.array([1.0, rec.row(m).y])
        return x @ coef[:, 0] - (x @ coef[:, 1:]) @ psi

    return QFunction(q_vec, (1, 2)), prop_vec, q_rec, prop_rec, h, center


@pytest.fixture
def tiny3():
    """Three patients, months 0..4, K = 2, window 2, initiating at 1, 2 and never."""
    y = np.array([[10.0, 12.0, 15.0, 11.0, 9.0],
                  [20.0, 18.0, 17.0, 21.0, 16.0],
                  [14.0, 13.0, 16.0, 15.0, 12.0]])
    x = np.array([[0.0] * 5, [1.0] * 5, [0.0] * 5])
    return LongitudinalDataset.from_arrays(y, {"injdrug": x}, treatment_month=[1, 2, 3], K=2, window=2)


def test_tiny_single_initiator_is_unidentified(tiny):
    # one initiation month: both blip features are multiples of k - T
    q, prop, *_ = _tiny_parts()
    with pytest.raises(SingularSystemError):
        solve_psi(assemble_system(tiny, B2, prop, q))


@pytest.mark.parametrize("form,outcome", [("G", "level"), ("G", "increase"), ("G_star", "level")])
def test_tiny_matches_brute_force(tiny3, form, outcome):
    q, prop, q_rec, prop_rec, h, center = _tiny_parts()
    sys_ = assemble_system(tiny3, B2, prop, q, form, h if form == "G_star" else None, outcome=outcome)
    A, b, fit_err = affine_from_grid(
        lambda psi: brute_force_G(tiny3, psi, prop_rec, q_rec, form, center, outcome=outcome), 2)
    assert fit_err < 1e-10                                   # the oracle itself is affine
    np.testing.assert_allclose(sys_.A, A, atol=1e-8)
    np.testing.assert_allclose(sys_.b, b, atol=1e-8)
    psi, _ = solve_psi(sys_)
    np.testing.assert_allclose(psi.psi, np.linalg.solve(A, b), rtol=1e-8)
    assert np.max(np.abs(brute_force_G(tiny3, psi.psi, prop_rec, q_rec, form, center, outcome=outcome))) < 1e-8


def test_per_patient_terms_sum_to_system(tiny):
    q, prop, *_ = _tiny_parts()
    sys_ = assemble_system(tiny, B2, prop, q)
    psi = np.array([0.3, -1.2])
    np.testing.assert_allclose(sys_.per_patient(psi).mean(axis=0), sys_.evaluate(psi), atol=1e-12)


def test_affine_in_psi_on_cohort(cohort_500):
    """The pipeline system equals the loop oracle at random psi, with the same nuisance inputs."""
    ds = cohort_500.observed.subset(np.arange(120))
    run = Pipeline(ds).run()
    model = quiet(lambda: run.propensity)
    q = quiet(run.q, "2")
    qv = q(ds, window_rows(ds, offsets=(12,)))
    rows = window_rows(ds, offsets=(12,))
    q_lookup = {(int(i), int(m)): v for i, m, v in zip(rows.pid, rows.m, qv)}
    pos = {pid: j for j, pid in enumerate(ds.ids)}

    def q_rec(rec, m, k):
        return q_lookup.get((pos[rec.id], m)) if k == m + 12 else None

    def prop_rec(rec, m):
        i = pos[rec.id]
        return float(model.predict_rows(ds, Rows(np.array([i]), np.array([m])))[0])

    sys_ = assemble_system(ds, B2, model, q, rows=rows)
    rng = np.random.default_rng(5)
    for _ in range(5):
        psi = rng.normal(size=2) * [20, 1]
        np.testing.assert_allclose(sys_.evaluate(psi), brute_force_G(ds, psi, prop_rec, q_rec),
                                   rtol=1e-9, atol=1e-9 * np.abs(sys_.b).max())


# -- pipeline ----------------------------------------------------------------------------------


def test_naive_pipeline_equals_manual(cohort_500):
    ds = cohort_500.observed
    run = Pipeline(ds).run()
    est = quiet(run.estimate, "1a")
    manual = assemble_system(ds, B2, run.propensity, naive_q("a", p=2), rows=window_rows(ds, offsets=(12,)),
                             outcome="increase")
    np.testing.assert_allclose(est.psi_hat, solve_psi(manual)[0].psi, rtol=1e-10)


def test_identity_gamma_collapse(cohort_500):
    """Estimator 4 equals the optimal-q estimator with an explicit identity covariance."""
    from coarse_snmm.estimators import optimal_q
    ds = cohort_500.observed
    run = Pipeline(ds).run()
    est4 = quiet(run.estimate, "4")
    months = ds.decision_months()
    explicit = CovarianceWorkingModel({int(m): np.eye(ds.window) for m in months}, "empirical", ds.window)
    q = optimal_q(run.window_duration, explicit, B2, ds.window)
    psi = solve_psi(run.system("5", q=q))[0].psi
    np.testing.assert_allclose(psi, est4.psi_hat, rtol=1e-9)


@pytest.mark.parametrize("menu_id", ["1a", "2", "3", "4", "5"])
def test_frequency_weights_equal_duplication(cohort_500, menu_id):
    ds = cohort_500.observed
    w = np.ones(ds.n)
    w[:150] = 2
    w[400:] = 0
    idx = np.r_[np.arange(400), np.arange(150)]
    a = quiet(Pipeline(ds).estimate, menu_id, w).psi_hat
    b = quiet(Pipeline(ds.subset(idx)).estimate, menu_id).psi_hat
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_residual_diagnostic(cohort_500):
    est = quiet(Pipeline(cohort_500.observed).estimate, "5")
    assert est.diagnostics["residual"] < 1e-8 * np.abs(est.system.b).max()
    assert est.diagnostics["rcond"] > 1e-12


def test_unbiased_at_truth():
    """With the true propensity and true centering, P_n G*(psi*) is mean zero."""
    c = simulate(SimulationConfig(n=20_000, seed=41))
    ds = c.observed
    prop = PooledLogisticModel(np.array(THETA), PROP_FEATURES)
    center = true_center(c.config)
    y_m = ds.y
    rows = window_rows(ds)
    mean = center(y_m[rows.pid, rows.m - ds.first_month], rows.m, rows.k)
    h = HRegressionFit(("cd4", "k_minus_m"), np.array([1.0, c.config.xi_true]), "plugin", PSI)
    np.testing.assert_allclose(h.predict(ds, rows)[0], mean)
    q = QFunction(lambda ds, rows: np.column_stack([np.ones(len(rows)), rows.m - 12.0]), tuple(range(1, 13)))
    sys_ = assemble_system(ds, B2, prop, q, "G_star", h, rows=rows)
    G = sys_.per_patient(PSI)
    z = G.mean(axis=0) / (G.std(axis=0, ddof=1) / np.sqrt(ds.n))
    assert np.all(np.abs(z) < 3.5), z


@pytest.mark.parametrize("menu_id", ["4", "5"])
def test_censored_cohort_close_to_truth(menu_id):
    c = simulate(SimulationConfig(n=4000, seed=43))
    ds = synthetic_dropout(c.observed, seed=6)
    assert ds.censored.mean() > 0.2
    est = quiet(Pipeline(ds, EstimatorConfig()).estimate, menu_id)
    z = (est.psi_hat - PSI) / np.sqrt(np.diag(est.sandwich()))
    assert np.all(np.abs(z) < 4), z
