"""Nuisance fits: outcome regressions, treated-duration moments and working covariance.

Three kinds of nuisance model feed the estimating equations:

* ``HRegressionFit``: E[H_psi(k) | L_m, untreated through m-1], either with
  psi left symbolic (outcome and each design column regressed separately,
  so the prediction stays affine in psi) or at a fixed plug-in psi.
* ``DurationFit``: E[D(k) | L_m, untreated through m] for the blip design
  columns D(k) (Tr, T*Tr, ...) via a hurdle model: logistic regression for
  "treatment started before k", then least squares among those treated.
* ``CovarianceWorkingModel``: Gamma^m_{k,s}, constant in L_m.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from ._glm import FitError, LogisticFit, collinear_features, fit_logistic, fit_wls, one_class_features
from .blip import BlipModel, BlipParams, h_design
from .data import LongitudinalDataset
from .propensity import CensoringWeights
from .rows import Rows, features, month_context, outcome_at, window_rows

__all__ = [
    "HRegressionFit",
    "DurationFit",
    "CovarianceWorkingModel",
    "NuisanceFit",
    "fit_h_regression",
    "fit_duration_two_part",
    "delta_vector",
    "estimate_gamma",
    "homoscedasticity_diagnostic",
    "DEFAULT_H_FEATURES",
    "DEFAULT_PRELIM_FEATURES",
    "DEFAULT_DURATION_FEATURES",
]

DEFAULT_PRELIM_FEATURES = (
    "1", "cd4", "injdrug", "m", "m^2", "cd4^2", "cd4*m", "injdrug*cd4", "injdrug*m",
)
DEFAULT_H_FEATURES = ("1", "cd4", "k_minus_m")
DEFAULT_DURATION_FEATURES = (
    "1", "cd4", "m", "m^2", "k_minus_m_1", "k_minus_m_1^2", "injdrug*k_minus_m_1",
    "cd4*k_minus_m_1", "cd4^2*k_minus_m_1", "cd4*m*k_minus_m_1",
    "injdrug*cd4*k_minus_m_1", "injdrug*m*k_minus_m_1",
)


def _row_weights(ds, rows: Rows, weights, censoring: CensoringWeights | None):
    w = np.ones(len(rows)) if weights is None else np.asarray(weights, dtype=float)[rows.pid]
    if censoring is not None:
        w = w * censoring.lookup(rows.pid, rows.m, rows.k)
    return w


# -- outcome regression ---------------------------------------------------------


@dataclass(frozen=True)
class HRegressionFit:
    """Fitted E[H(k) | L_m, untreated through m-1].

    ``coef`` has shape (q, 1 + p) in symbolic mode (outcome column first,
    then one column per blip parameter) and (q,) in plug-in mode.
    """

    features: tuple
    coef: np.ndarray
    mode: str
    psi_tilde: np.ndarray | None = None

    def predict(self, ds: LongitudinalDataset, rows: Rows, X: np.ndarray | None = None):
        """Return (mean_y, mean_d) with E[H_psi] = mean_y - mean_d @ psi."""
        if X is None:
            X = features(ds, rows, self.features)
        if self.mode == "symbolic":
            pred = X @ self.coef
            return pred[:, 0], pred[:, 1:]
        return X @ self.coef, None

    def centered(self, ds, rows, psi, X=None) -> np.ndarray:
        mean_y, mean_d = self.predict(ds, rows, X)
        return mean_y if mean_d is None else mean_y - mean_d @ np.asarray(psi)


def fit_h_regression(ds: LongitudinalDataset, blip: BlipModel, psi_tilde: BlipParams | None,
                     features_: tuple = DEFAULT_H_FEATURES, weights: np.ndarray | None = None,
                     censoring: CensoringWeights | None = None, rows: Rows | None = None,
                     X: np.ndarray | None = None, outcome_offset: int = 0,
                     y: np.ndarray | None = None, D: np.ndarray | None = None) -> HRegressionFit:
    """IPCW-weighted least squares for E[H(k) | L_m, untreated through m-1].

    ``psi_tilde=None`` selects symbolic mode.  ``rows`` defaults to the full
    outcome window among patients untreated through m-1 and followed
    through k.  ``outcome_offset`` subtracts Y_m when set to 1 (change
    score), which leaves DR estimates unchanged when ``cd4`` is a feature.
    ``X``, ``y`` and ``D`` may be passed precomputed for ``rows``.
    """
    features_ = tuple(features_)
    if rows is None:
        rows = window_rows(ds)
    if X is None:
        X = features(ds, rows, features_)
    if y is None:
        y = outcome_at(ds, rows.pid, rows.k)
    if outcome_offset:
        y = y - outcome_at(ds, rows.pid, rows.m)
    if D is None:
        D = h_design(blip, ds, rows.pid, rows.k)
    w = _row_weights(ds, rows, weights, censoring)
    if psi_tilde is None:
        target = np.column_stack([y, D])
        fit = fit_wls(X, target, w, features_, what="outcome regression")
        return HRegressionFit(features_, fit.coef, "symbolic")
    psi = np.asarray(psi_tilde.psi if isinstance(psi_tilde, BlipParams) else psi_tilde, dtype=float)
    fit = fit_wls(X, y - D @ psi, w, features_, what="outcome regression")
    return HRegressionFit(features_, fit.coef, "plugin", psi)


# -- treated-duration hurdle models ------------------------------------------


@dataclass(frozen=True)
class DurationFit:
    """Hurdle model for E[D(k) | L_m, untreated through m].

    ``hurdle`` models pr(T < k); ``coef`` (q, p) gives E[D(k) | T < k].  Rows
    with k <= m + 1, or m >= K, are structural zeros (treatment cannot start
    before k, or at all after K) and are predicted as exactly zero.  ``hurdle is None`` with ``coef``
    None means no patient started treatment in the fitting data.
    """

    features: tuple
    hurdle: LogisticFit | None
    coef: np.ndarray | None
    p: int
    always: bool = False
    metadata: dict = field(default_factory=dict)

    def predict(self, ds: LongitudinalDataset, rows: Rows, X: np.ndarray | None = None) -> np.ndarray:
        out = np.zeros((len(rows), self.p))
        if self.coef is None:
            return out
        if X is None:
            X = features(ds, rows, self.features)
        if self.always:
            out = X @ self.coef
        else:
            lin = X @ np.column_stack([self.hurdle.coef, self.coef])
            out = expit(lin[:, :1]) * lin[:, 1:]
        out[(rows.k <= rows.m + 1) | (rows.m >= ds.K)] = 0.0
        return out


def fit_duration_two_part(ds: LongitudinalDataset, blip: BlipModel, features_: tuple = DEFAULT_DURATION_FEATURES,
                          rows: Rows | None = None, weights: np.ndarray | None = None,
                          X: np.ndarray | None = None, start: np.ndarray | None = None) -> DurationFit:
    """Fit the hurdle model on rows untreated through m and followed through k.

    Parameters
    ----------
    rows : Rows, optional
        Defaults to the full outcome window with T > m.  Structural-zero
        rows (k <= m + 1 or m >= K) are dropped before fitting.
    X : ndarray, optional
        Design for ``rows``.
    start : ndarray, optional
        Warm start for the logistic part.
    """
    features_ = tuple(features_)
    if rows is None:
        rows = window_rows(ds, untreated_through="m")
    keep = (rows.k > rows.m + 1) & (rows.m < ds.K)
    if X is None:
        X = features(ds, rows, features_)
    if not keep.all():
        rows = rows.take(keep)
        X = X[keep]
    w = np.ones(len(rows)) if weights is None else np.asarray(weights, dtype=float)[rows.pid]
    if not np.all(ds.treatment_month[rows.pid] > rows.m):
        raise ValueError("duration models condition on no treatment through m")
    started = ds.treated[rows.pid] & (ds.treatment_month[rows.pid] < rows.k)
    pos = started & (w > 0)
    if not pos.any():
        warnings.warn("no treatment initiations in the duration risk set; predicted durations are 0",
                      stacklevel=2)
        return DurationFit(features_, None, None, blip.p)
    D = h_design(blip, ds, rows.pid[pos], rows.k[pos])
    Xpos = X[pos]
    coef = np.zeros((len(features_), blip.p))
    dropped = []
    try:
        coef[:] = fit_wls(Xpos, D, w[pos], features_, what="duration regression").coef
    except FitError:
        # few initiators (e.g. in a small subgroup): fit the identified columns only
        dropped = collinear_features(Xpos, w[pos], features_)
        if len(dropped) == len(features_):
            raise
        warnings.warn(f"duration regression: collinear features fixed at 0: {', '.join(dropped)}",
                      stacklevel=2)
        cols = np.array([f not in dropped for f in features_])
        coef[cols] = fit_wls(Xpos[:, cols], D, w[pos], np.array(features_)[cols],
                             what="duration regression").coef
    meta = {"rows": len(rows), "positives": int(pos.sum()), "dropped": dropped}
    if np.all(started[w > 0]):
        return DurationFit(features_, None, coef, blip.p, always=True, metadata=meta)
    y = started.astype(float)
    try:
        hurdle = fit_logistic(X, y, w, features_, what="duration hurdle model", start=start)
    except FitError:
        # a subgroup with no (or only) initiators separates; pool it with the rest
        drop = set(one_class_features(X, y, w, features_)) | set(collinear_features(X, w, features_))
        if not drop or len(drop) == len(features_):
            raise
        names = [f for f in features_ if f in drop]
        warnings.warn(f"duration hurdle model: separating features fixed at 0: {', '.join(names)}",
                      stacklevel=2)
        cols = np.array([f not in drop for f in features_])
        sub = fit_logistic(X[:, cols], y, w, np.array(features_)[cols], what="duration hurdle model",
                           start=None if start is None else np.asarray(start)[cols])
        coef_h = np.zeros(len(features_))
        coef_h[cols] = sub.coef
        hurdle = replace(sub, coef=coef_h, names=features_)
        meta["hurdle_dropped"] = names
    return DurationFit(features_, hurdle, coef, blip.p, metadata=meta)


def delta_vector(duration: DurationFit, blip: BlipModel, ds: LongitudinalDataset, rows: Rows,
                 X: np.ndarray | None = None) -> np.ndarray:
    """Delta_m(k): blip features for initiation at m minus E[D(k) | untreated through m].

    The first term is the value of D(k) when A_m = 1 (T = m); it is exact.
    """
    ctx = month_context(ds, rows.pid, rows.m)
    initiate_now = blip.features(rows.m, rows.k, ctx)
    return initiate_now - duration.predict(ds, rows, X)


# -- working covariance -------------------------------------------------------------


@dataclass(frozen=True)
class CovarianceWorkingModel:
    """Gamma^m over the outcome window, indexed by offsets d = k - m = 1..L."""

    gamma: dict           # m -> (L, L) symmetric matrix
    mode: str
    window: int

    def matrix(self, m: int) -> np.ndarray:
        if self.mode == "identity":
            return np.eye(self.window)
        return self.gamma[int(m)]

    @classmethod
    def identity(cls, window: int, months=()) -> "CovarianceWorkingModel":
        return cls({int(m): np.eye(window) for m in months}, "identity", window)


def residual_panel(ds, rows: Rows, resid: np.ndarray, window: int):
    """Scatter row residuals into an array (patients, decision months, window); NaN = missing."""
    months = ds.decision_months()
    panel = np.full((ds.n, len(months), window), np.nan)
    panel[rows.pid, rows.m - months[0], rows.k - rows.m - 1] = resid
    return months, panel


def estimate_gamma(ds: LongitudinalDataset, blip: BlipModel, psi_tilde: BlipParams | np.ndarray,
                   h_fit: HRegressionFit, mode: str = "empirical", rows: Rows | None = None,
                   weights: np.ndarray | None = None, pooling: str = "per_m",
                   X: np.ndarray | None = None) -> CovarianceWorkingModel:
    """Empirical mean of residual cross-products, pooled over patients within m.

    Entry (k, s) averages over patients untreated through m-1 and followed
    through max(k, s).  With fewer than two contributing patients an
    off-diagonal entry is set to 0 and a diagonal entry to the mean of the
    available diagonal entries.  ``pooling="lag"`` pools over m by lags
    (k - m, s - m) instead.
    """
    window = ds.window
    months = ds.decision_months()
    if mode == "identity":
        return CovarianceWorkingModel.identity(window, months)
    if mode != "empirical":
        raise ValueError(f"gamma mode must be 'identity' or 'empirical', not {mode!r}")
    if rows is None:
        rows = window_rows(ds)
    psi = np.asarray(psi_tilde.psi if isinstance(psi_tilde, BlipParams) else psi_tilde, dtype=float)
    H = outcome_at(ds, rows.pid, rows.k) - h_design(blip, ds, rows.pid, rows.k) @ psi
    resid = H - h_fit.centered(ds, rows, psi, X)
    months, panel = residual_panel(ds, rows, resid, window)
    f = np.ones(ds.n) if weights is None else np.asarray(weights, dtype=float)
    mask = ~np.isnan(panel)
    filled = np.where(mask, panel, 0.0)
    present = (f > 0)[:, None, None] & mask
    num = np.einsum("i,imk,ims->mks", f, filled, filled)
    den = np.einsum("i,imk,ims->mks", f, mask.astype(float), mask.astype(float))
    cnt = np.einsum("imk,ims->mks", present.astype(float), present.astype(float))
    if pooling == "lag":
        num = np.broadcast_to(num.sum(0), num.shape)
        den = np.broadcast_to(den.sum(0), den.shape)
        cnt = np.broadcast_to(cnt.sum(0), cnt.shape)
    elif pooling != "per_m":
        raise ValueError(f"pooling must be 'per_m' or 'lag', not {pooling!r}")
    gamma = {}
    sparse = False
    for j, m in enumerate(months):
        with np.errstate(invalid="ignore", divide="ignore"):
            g = num[j] / den[j]
        ok = cnt[j] >= 2
        if not ok.all():
            sparse = True
            diag_ok = np.diag(ok)
            pooled = float(np.mean(np.diag(g)[diag_ok])) if diag_ok.any() else 1.0
            g = np.where(ok, g, 0.0)
            idx = np.flatnonzero(~diag_ok)
            g[idx, idx] = pooled
        gamma[int(m)] = (g + g.T) / 2
    if sparse:
        warnings.warn("some working-covariance entries had fewer than 2 contributing patients; "
                      "fallback values used", stacklevel=2)
    return CovarianceWorkingModel(gamma, "empirical", window)


def homoscedasticity_diagnostic(ds: LongitudinalDataset, blip: BlipModel, psi_tilde, h_fit: HRegressionFit,
                                gamma: CovarianceWorkingModel, rows: Rows | None = None) -> dict:
    """Check that residual cross-products do not depend on A_m.

    Regresses r_k r_s - Gamma^m_{k,s} on (1, A_m) over person-month pairs
    k <= s and reports the A_m coefficient with a patient-clustered SE.
    """
    if rows is None:
        rows = window_rows(ds)
    psi = np.asarray(psi_tilde.psi if isinstance(psi_tilde, BlipParams) else psi_tilde, dtype=float)
    H = outcome_at(ds, rows.pid, rows.k) - h_design(blip, ds, rows.pid, rows.k) @ psi
    resid = H - h_fit.centered(ds, rows, psi)
    months, panel = residual_panel(ds, rows, resid, ds.window)
    L = ds.window
    ku, su = np.triu_indices(L)
    ys, a_list, groups = [], [], []
    for j, m in enumerate(months):
        R = panel[:, j, :]
        prod = R[:, ku] * R[:, su] - gamma.matrix(m)[ku, su][None, :]
        ok = ~np.isnan(prod)
        i_idx, c_idx = np.nonzero(ok)
        ys.append(prod[i_idx, c_idx])
        a_list.append((ds.treatment_month[i_idx] == m).astype(float))
        groups.append(i_idx)
    y = np.concatenate(ys)
    a = np.concatenate(a_list)
    g = np.concatenate(groups)
    X = np.column_stack([np.ones_like(a), a])
    XtX_inv = np.linalg.inv(X.T @ X)
    beta = XtX_inv @ X.T @ y
    e = y - X @ beta
    U = np.zeros((ds.n, 2))
    np.add.at(U, g, X * e[:, None])
    V = XtX_inv @ (U.T @ U) @ XtX_inv
    se = float(np.sqrt(V[1, 1]))
    return {"coef": float(beta[1]), "se": se, "t": float(beta[1] / se), "n_pairs": len(y)}


@dataclass
class NuisanceFit:
    """Container for the nuisance fits of one estimator run (xi)."""

    h: HRegressionFit | None = None
    duration: DurationFit | None = None
    gamma: CovarianceWorkingModel | None = None
    metadata: dict = field(default_factory=dict)
