"""Pooled logistic models for treatment initiation and dropout, and IPCW weights."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._glm import FitError, LogisticFit, fit_logistic
from .data import LongitudinalDataset
from .rows import Rows, decision_rows, month_context
from .terms import design_matrix

__all__ = [
    "PooledLogisticModel",
    "PropensityModel",
    "CensoringModel",
    "CensoringWeights",
    "PositivityError",
    "fit_pooled_logistic",
    "predict_p",
    "ipcw_weights",
    "propensity_rows",
    "censoring_rows",
    "DEFAULT_PROPENSITY_FEATURES",
]

DEFAULT_PROPENSITY_FEATURES = ("1", "injdrug", "cd4", "m")
DEFAULT_CENSORING_FEATURES = ("1", "cd4", "m", "a")
POSITIVITY_FLOOR = 0.01


class PositivityError(FitError):
    pass


@dataclass(frozen=True)
class PooledLogisticModel:
    """Logistic model over person-months.

    ``theta`` is ``None`` for the degenerate censoring model fitted to data
    without dropout, which predicts probability one everywhere.
    """

    theta: np.ndarray | None
    feature_names: tuple
    outcome: str = "initiation"
    fit: LogisticFit | None = field(default=None, repr=False)
    scores: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.theta is not None:
            theta = np.asarray(self.theta, dtype=float)
            if theta.shape != (len(self.feature_names),) or not np.all(np.isfinite(theta)):
                raise ValueError("coefficients must be finite and match the feature list")
            object.__setattr__(self, "theta", theta)

    def predict_context(self, context: dict, size: int) -> np.ndarray:
        if self.theta is None:
            return np.ones(size)
        X = design_matrix(self.feature_names, context, size)
        return 1.0 / (1.0 + np.exp(-(X @ self.theta)))

    def predict_X(self, X: np.ndarray) -> np.ndarray:
        if self.theta is None:
            return np.ones(len(X))
        return 1.0 / (1.0 + np.exp(-(X @ self.theta)))

    def predict_rows(self, ds: LongitudinalDataset, rows: Rows) -> np.ndarray:
        return self.predict_context(month_context(ds, rows.pid, rows.m), len(rows))


# The two roles share one implementation; the names document intent.
PropensityModel = PooledLogisticModel
CensoringModel = PooledLogisticModel


def propensity_rows(ds: LongitudinalDataset) -> tuple[Rows, np.ndarray]:
    """Risk set T >= m in follow-up at m; outcome A_m = 1{T == m}."""
    rows = decision_rows(ds, "m-1")
    return rows, (ds.treatment_month[rows.pid] == rows.m).astype(float)


def censoring_rows(ds: LongitudinalDataset) -> tuple[Rows, np.ndarray]:
    """Rows (pid, p-1) for every followed month before the end of the grid.

    The outcome is 1{still in follow-up at p}; features are evaluated on the
    history through p-1.
    """
    pids, ms = [], []
    for p in range(ds.first_month + 1, ds.end_month + 1):
        idx = np.flatnonzero(ds.observed(p - 1))
        pids.append(idx)
        ms.append(np.full(len(idx), p - 1))
    pid, m = np.concatenate(pids), np.concatenate(ms)
    order = np.lexsort((m, pid))
    rows = Rows(pid[order], m[order])
    return rows, (ds.last_month[rows.pid] >= rows.m + 1).astype(float)


def fit_pooled_logistic(ds: LongitudinalDataset, outcome: str = "initiation", features=None,
                        weights: np.ndarray | None = None, start=None, design=None) -> PooledLogisticModel:
    """Maximum (partial) likelihood fit of a pooled logistic model.

    Parameters
    ----------
    outcome : {"initiation", "censoring"}
    features : sequence of term strings; the first is normally the intercept ``"1"``.
    weights : per-patient frequency weights (bootstrap counts), default ones.
    design : (rows, y, X), optional
        Precomputed risk-set rows, outcomes and design matrix.
    """
    if outcome == "initiation":
        features = tuple(features or DEFAULT_PROPENSITY_FEATURES)
        rows, y = propensity_rows(ds) if design is None else design[:2]
    elif outcome == "censoring":
        features = tuple(features or DEFAULT_CENSORING_FEATURES)
        rows, y = censoring_rows(ds) if design is None else design[:2]
    else:
        raise ValueError(f"outcome must be 'initiation' or 'censoring', not {outcome!r}")
    w = np.ones(len(rows)) if weights is None else np.asarray(weights, dtype=float)[rows.pid]
    if len(rows) == 0 or w.sum() <= 0:
        raise FitError(f"{outcome} model: empty risk set")
    if outcome == "censoring" and np.all(y[w > 0] == 1):
        warnings.warn("no dropout observed; censoring weights are identically one", stacklevel=2)
        return PooledLogisticModel(None, features, outcome)
    X = design_matrix(features, month_context(ds, rows.pid, rows.m), len(rows)) if design is None else design[2]
    fit = fit_logistic(X, y, w, features, what=f"{outcome} model", start=start)
    return PooledLogisticModel(fit.coef, features, outcome, fit, fit.score_contributions(X, y) * w[:, None])


def predict_p(model: PooledLogisticModel, m, covs: dict) -> float:
    """Predicted probability for one person-month; ``covs`` holds the named variables."""
    ctx = {name: np.atleast_1d(np.asarray(v, dtype=float)) for name, v in covs.items()}
    ctx["m"] = np.atleast_1d(float(m))
    try:
        return float(model.predict_context(ctx, 1)[0])
    except KeyError as exc:
        raise ValueError(f"missing feature value: {exc}") from None


@dataclass(frozen=True)
class CensoringWeights:
    """W_{m,k} = 1 / prod_{p=m+1}^{k} pr(C_p = 0 | history through p-1).

    Stored as cumulative log survival per patient and month; ``lookup`` is
    only meaningful for patients followed through k.
    """

    ids: np.ndarray
    first_month: int
    cumlog: np.ndarray   # (n, M); sum of log pr(C_p = 0) for p <= month

    @classmethod
    def unit(cls, ds: LongitudinalDataset) -> "CensoringWeights":
        return cls(ds.ids, ds.first_month, np.zeros(ds.y.shape))

    def lookup(self, pid, m, k) -> np.ndarray:
        pid = np.asarray(pid)
        jm = np.asarray(m) - self.first_month
        jk = np.asarray(k) - self.first_month
        return np.exp(self.cumlog[pid, jm] - self.cumlog[pid, jk])

    def __getitem__(self, key) -> float:
        pid_label, m, k = key
        pos = np.flatnonzero(self.ids == pid_label)
        if len(pos) == 0:
            raise KeyError(pid_label)
        return float(self.lookup(pos[:1], [m], [k])[0])


def ipcw_weights(model: PooledLogisticModel, ds: LongitudinalDataset,
                 floor: float = POSITIVITY_FLOOR) -> CensoringWeights:
    if model.theta is None:
        return CensoringWeights.unit(ds)
    rows, _ = censoring_rows(ds)
    prob = model.predict_rows(ds, rows)
    if np.any(prob < floor):
        i = int(np.argmin(prob))
        raise PositivityError(
            f"predicted probability of remaining in follow-up {prob[i]:.4g} < {floor} "
            f"(patient {ds.ids[rows.pid[i]]!r}, month {rows.m[i] + 1}); censoring weights "
            "require the uncensored probability to be bounded away from zero"
        )
    logp = np.zeros(ds.y.shape)
    logp[rows.pid, rows.m + 1 - ds.first_month] = np.log(prob)
    return CensoringWeights(ds.ids, ds.first_month, np.cumsum(logp, axis=1))
