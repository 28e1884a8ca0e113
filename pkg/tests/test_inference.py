import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coarse_snmm import BootstrapFailure, bootstrap, percentile, sandwich
from coarse_snmm._rng import stream
from coarse_snmm.estimators import EstimatingEquationSystem
from coarse_snmm.inference import resample_counts
from coarse_snmm.pipeline import EstimationError, Pipeline

from conftest import quiet


def _system(A_i, b_i, weights=None):
    A_i, b_i = np.asarray(A_i, float), np.asarray(b_i, float)
    f = np.ones(len(b_i)) if weights is None else np.asarray(weights, float)
    A = np.einsum("i,ijk->jk", f, A_i) / f.sum()
    b = f @ b_i / f.sum()
    return EstimatingEquationSystem(A, b, A_i, b_i, f)


def test_scalar_sandwich_is_variance_over_n():
    # G_i(psi) = x_i - psi: psi-hat is the mean, sandwich is var(x) / n with divisor n
    x = np.array([1.0, 4.0, 2.0, 7.0, 6.0])
    sys_ = _system(np.ones((5, 1, 1)), x[:, None])
    V = sandwich(sys_, psi=[x.mean()])
    assert V[0, 0] == pytest.approx(x.var() / 5, rel=1e-12)


def test_orthogonal_components_give_diagonal():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    b_i = np.zeros((100, 2))
    b_i[:50, 0] = x
    b_i[50:, 1] = x                 # G_i1 G_i2 = 0 for every patient
    A_i = np.tile(np.eye(2), (100, 1, 1))
    V = sandwich(_system(A_i, b_i), psi=np.zeros(2))
    assert V[0, 1] == 0.0 and V[1, 0] == 0.0


def test_sandwich_weights_equal_duplication():
    rng = np.random.default_rng(1)
    A_i = rng.normal(size=(20, 2, 2)) + 3 * np.eye(2)
    b_i = rng.normal(size=(20, 2))
    w = rng.integers(0, 3, 20).astype(float)
    idx = np.repeat(np.arange(20), w.astype(int))
    a = sandwich(_system(A_i, b_i, w), psi=[0.2, -0.1])
    b = sandwich(_system(A_i[idx], b_i[idx]), psi=[0.2, -0.1])
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_singular_derivative_raises():
    with pytest.raises(np.linalg.LinAlgError):
        sandwich(_system(np.zeros((3, 2, 2)), np.ones((3, 2))), psi=np.zeros(2))
    with pytest.raises(ValueError):
        sandwich(_system(np.ones((3, 1, 1)), np.ones((3, 1))))


def test_pipeline_sandwich_symmetric_psd(cohort_500):
    est = quiet(Pipeline(cohort_500.observed).estimate, "5")
    V = est.sandwich()
    np.testing.assert_array_equal(V, V.T)
    assert np.linalg.eigvalsh(V)[0] > 0


def test_nearest_rank_percentile():
    draws = np.arange(1.0, 11.0)[::-1]
    assert percentile(draws, 0.025) == 1.0
    assert percentile(draws, 0.975) == 10.0
    assert percentile(draws, 0.5) == 5.0
    assert percentile(draws, 0.51) == 6.0
    np.testing.assert_array_equal(percentile(np.column_stack([draws, -draws]), 0.2), [2.0, -9.0])
    with pytest.raises(ValueError):
        percentile(np.zeros((0, 2)), 0.5)


def test_constant_draws_give_point_interval():
    draws = np.full((40, 2), 3.5)
    assert percentile(draws, 0.025).tolist() == percentile(draws, 0.975).tolist() == [3.5, 3.5]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=60),
       st.floats(0.5, 0.99))
def test_percentile_monotone_in_level(values, level):
    draws = np.array(values)
    lo, hi = percentile(draws, (1 - level) / 2), percentile(draws, 1 - (1 - level) / 2)
    lo2, hi2 = percentile(draws, (1 - 0.5) / 2), percentile(draws, 1 - (1 - 0.5) / 2)
    assert lo <= lo2 <= hi2 <= hi
    assert draws.min() <= lo and hi <= draws.max()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 500), st.integers(0, 2**31))
def test_resample_preserves_n(n, seed):
    counts = resample_counts(n, stream(seed, 0))
    assert counts.sum() == n and np.all(counts >= 0)


def test_bootstrap_deterministic_and_keyed(cohort_500):
    pl = Pipeline(cohort_500.observed)
    a = quiet(bootstrap, pl, "4", B=12, seed=7)
    b = quiet(bootstrap, Pipeline(cohort_500.observed), "4", B=12, seed=7)
    np.testing.assert_array_equal(a.draws, b.draws)
    c = quiet(bootstrap, pl, "4", B=12, seed=7, key=(3,))
    assert not np.array_equal(a.draws, c.draws)
    assert a.failures == 0 and a.draws.shape == (12, 2)
    assert np.all(a.lower <= a.upper)
    narrow = quiet(bootstrap, pl, "4", B=12, seed=7, level=0.5)
    assert np.all(a.lower <= narrow.lower) and np.all(narrow.upper <= a.upper)


def test_bootstrap_draw_equals_materialised_resample(cohort_500):
    ds = cohort_500.observed
    res = quiet(bootstrap, ds, "2", B=3, seed=11)
    counts = resample_counts(ds.n, stream(11, 2))
    idx = np.repeat(np.arange(ds.n), counts.astype(int))
    direct = quiet(Pipeline(ds.subset(idx)).estimate, "2").psi_hat
    np.testing.assert_allclose(res.draws[2], direct, rtol=1e-6)


class _Flaky(Pipeline):
    """Fails every replicate whose index is in ``bad``."""

    def __init__(self, ds, bad):
        super().__init__(ds)
        self.bad, self.calls = set(bad), -1

    def estimate(self, menu_id, weights=None):
        if weights is not None:
            self.calls += 1
            if self.calls in self.bad:
                raise EstimationError("duration model", "synthetic failure")
        return super().estimate(menu_id, weights)


def test_bootstrap_failures_counted(cohort_500):
    res = quiet(bootstrap, _Flaky(cohort_500.observed, {1, 4}), "2", B=10, seed=0)
    assert res.failures == 2 and len(res.draws) == 8
    assert res.census == {"duration model": 2}


def test_bootstrap_too_many_failures(cohort_500):
    with pytest.raises(BootstrapFailure) as info:
        quiet(bootstrap, _Flaky(cohort_500.observed, {0, 1, 2}), "2", B=10, seed=0)
    assert info.value.census == {"duration model": 3}


def test_bootstrap_rejects_zero_B(cohort_500):
    with pytest.raises(ValueError):
        bootstrap(cohort_500.observed, "2", B=0)
