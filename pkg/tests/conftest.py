import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coarse_snmm import LongitudinalDataset, SimulationConfig, simulate  # noqa: E402


@pytest.fixture(scope="session")
def cohort_2000():
    return simulate(SimulationConfig(n=2000, seed=1))


@pytest.fixture(scope="session")
def cohort_500():
    return simulate(SimulationConfig(n=500, seed=3))


@pytest.fixture
def tiny():
    """Two patients, months 0..4, K = 2, window 2; patient 0 starts treatment at month 1."""
    y = np.array([[10.0, 12.0, 15.0, 11.0, 9.0],
                  [20.0, 18.0, 17.0, 21.0, 16.0]])
    x = np.array([[0.0] * 5, [1.0] * 5])
    return LongitudinalDataset.from_arrays(y, {"injdrug": x}, treatment_month=[1, 3], K=2, window=2)


def synthetic_dropout(ds, seed=0, alpha=(-3.2, 0.002), floor_month=None):
    """Censor ``ds`` with a MAR hazard logit(alpha0 + alpha1 * Y_{p-1}) for leaving at p."""
    rng = np.random.default_rng(seed)
    last = ds.last_month.copy()
    for p in range(ds.first_month + 1, ds.end_month + 1):
        j = p - 1 - ds.first_month
        alive = last >= p
        h = 1 / (1 + np.exp(-(alpha[0] + alpha[1] * ds.y[:, j])))
        leave = alive & (rng.random(ds.n) < h)
        last[leave] = p - 1
    # initiation after dropout is unobserved: such patients are recorded as never treated
    T = np.where(ds.treatment_month > last, ds.K + 1, ds.treatment_month)
    return LongitudinalDataset.from_arrays(
        np.where(np.isnan(ds.y), 0.0, ds.y), {c: np.nan_to_num(v) for c, v in ds.covariates.items()},
        T, ds.K, ds.first_month, last, ds.ids, ds.window)


def quiet(fn, *args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kwargs)
