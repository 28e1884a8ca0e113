"""Weighted logistic and least-squares fitting on raw design matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit

MAX_ITER = 100
SCORE_TOL = 1e-8
RANK_TOL = 1e-10
COND_TOL = 1e-13
SEPARATION_TOL = 1e-10


class FitError(RuntimeError):
    """A nuisance or treatment model could not be fitted."""


def _scales(X: np.ndarray) -> np.ndarray:
    s = np.max(np.abs(X), axis=0) if len(X) else np.ones(X.shape[1])
    s[s == 0] = 1.0
    return s


def collinear_features(X: np.ndarray, w: np.ndarray, names) -> list[str]:
    """Names of columns dropped by a rank-revealing QR of sqrt(w) X."""
    Xs = X / _scales(X) * np.sqrt(w)[:, None]
    _, R, piv = scipy.linalg.qr(Xs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        return list(names)
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    return [names[j] for j in piv[rank:]]


def one_class_features(X: np.ndarray, y: np.ndarray, w: np.ndarray, names) -> list[str]:
    """Names of non-constant columns whose nonzero rows (w > 0) all share one outcome.

    Such a column separates the data: its MLE coefficient diverges.
    """
    keep = w > 0
    X, y = X[keep], y[keep]
    out = []
    for j, name in enumerate(names):
        nz = X[:, j] != 0
        if nz.all() or not nz.any():
            continue
        if np.all(y[nz] == 1) or np.all(y[nz] == 0):
            out.append(name)
    return out


def _check_rank(X, w, names, what):
    if X.shape[0] == 0 or w.sum() <= 0:
        raise FitError(f"{what}: empty risk set")
    bad = collinear_features(X, w, names)
    if bad:
        raise FitError(f"{what}: rank-deficient design; collinear features: {', '.join(bad)}")


@dataclass
class WLSFit:
    coef: np.ndarray          # (p,) or (p, q)
    names: tuple

    def predict(self, X: np.ndarray) -> np.ndarray:
        return X @ self.coef


def _scaled_columns(X: np.ndarray, keep: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``keep`` of X, transposed to (features, rows) and divided by column max |x|.

    The transposed C-ordered layout makes X'r and X'VX fast; a column-major
    X avoids a copy-transpose here.
    """
    idx = np.flatnonzero(keep)
    XT = np.ascontiguousarray(X.T) if len(idx) == X.shape[0] else X.T.take(idx, axis=1)
    if XT.shape[1]:
        s = np.maximum(XT.max(axis=1), -XT.min(axis=1))
    else:
        s = np.ones(XT.shape[0])
    s[s == 0] = 1.0
    return XT / s[:, None], s


def fit_wls(X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None, names=None,
            what: str = "least squares") -> WLSFit:
    """Weighted least squares; ``y`` may have several columns (fitted jointly)."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(p))
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    keep = w > 0
    if n == 0 or not keep.any():
        raise FitError(f"{what}: empty risk set")
    XT, s = _scaled_columns(X, keep)
    y, w = np.asarray(y, dtype=float)[keep], w[keep]
    gram = (XT * w) @ XT.T
    wy = y * w[:, None] if y.ndim == 2 else y * w
    rhs = XT @ wy
    try:
        evals = np.linalg.eigvalsh(gram)
        if evals[0] <= COND_TOL * max(evals[-1], 1e-300):
            raise np.linalg.LinAlgError
        beta = scipy.linalg.solve(gram, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        _check_rank(X[keep], w, names, what)
        raise FitError(f"{what}: ill-conditioned design")
    # one step of iterative refinement keeps the normal equations tight
    resid = y - (XT.T @ beta)
    corr = XT @ (resid * w[:, None] if resid.ndim == 2 else resid * w)
    beta = beta + scipy.linalg.solve(gram, corr, assume_a="pos")
    coef = beta / s[:, None] if beta.ndim == 2 else beta / s
    return WLSFit(coef, names)


@dataclass
class LogisticFit:
    coef: np.ndarray
    names: tuple
    iterations: int
    loglik: float
    loglik_path: list
    max_score: float

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        return X @ self.coef

    def predict(self, X) -> np.ndarray:
        return expit(X @ self.coef)

    def score_contributions(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-record scores x_i (y_i - p_i); they sum to ~0 at the MLE."""
        return X * (np.asarray(y, dtype=float) - self.predict(X))[:, None]


def _loglik(eta, y, w):
    # softplus(eta) = log(1 + e^eta), written to avoid overflow
    softplus = np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))
    return float(np.sum(w * (y * eta - softplus)))


def fit_logistic(X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None, names=None,
                 what: str = "logistic regression", start: np.ndarray | None = None,
                 max_iter: int = MAX_ITER, tol: float = SCORE_TOL) -> LogisticFit:
    """Maximum likelihood by Newton-Raphson with step halving.

    Columns are rescaled by their maximum absolute value during fitting.
    Convergence: every component of the summed score, in original units,
    is below ``tol`` or below the rounding level of that sum
    (64 eps sum_i w_i |x_ij|), whichever is larger.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(p))
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    keep = w > 0
    y, w = np.asarray(y, dtype=float)[keep], w[keep]
    total = w.sum()
    if len(w) == 0 or total <= 0:
        raise FitError(f"{what}: empty risk set")
    events = float(np.sum(w * y))
    if events <= 0 or events >= total:
        label = "no events" if events <= 0 else "no non-events"
        raise FitError(f"{what}: non-convergence ({label}; the MLE for feature {names[0]!r} is infinite)")
    XT, s = _scaled_columns(X, keep)
    beta = np.zeros(p) if start is None else np.asarray(start, dtype=float) * s
    eta = beta @ XT
    # score_j in original units is (scaled score_j) / s_j
    limit = np.maximum(tol, 64 * np.finfo(float).eps * (np.abs(XT) @ w)) * s
    ll = _loglik(eta, y, w)
    path = [ll]
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        if it > 1 and np.max(np.abs(y - mu)) < SEPARATION_TOL:
            j = int(np.argmax(np.abs(beta)))
            raise FitError(f"{what}: complete separation; coefficient of feature {names[j]!r} diverges")
        score = XT @ (w * (y - mu))
        if np.all(np.abs(score) < limit):
            return LogisticFit(beta / s, names, it - 1, ll, path, float(np.max(np.abs(score / s))))
        v = w * mu * (1 - mu)
        if it == 1:
            info = (XT * v) @ XT.T
            evals = np.linalg.eigvalsh(info)
            if evals[0] <= COND_TOL * max(evals[-1], 1e-300):
                _check_rank(X[keep], w, names, what)
            XT32 = XT.astype(np.float32)
        else:
            # The Hessian only steers the step; the float64 score fixes the solution.
            info = ((XT32 * v.astype(np.float32)) @ XT32.T).astype(float)
        try:
            step = scipy.linalg.solve(info, score, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            try:
                if it == 1:
                    raise np.linalg.LinAlgError
                info = (XT * v) @ XT.T      # single precision lost definiteness; redo in double
                step = scipy.linalg.solve(info, score, assume_a="pos")
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                _check_rank(X[keep], w, names, what)
                raise FitError(f"{what}: singular information matrix (separation?)") from None
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = cand @ XT
            ll_c = _loglik(eta_c, y, w)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, eta, ll = cand, eta_c, max(ll_c, ll)
        path.append(ll)
    j = int(np.argmax(np.abs(beta)))
    hint = " (quasi-separation?)" if np.max(np.abs(eta)) > 30 else ""
    raise FitError(f"{what}: non-convergence after {max_iter} iterations{hint}; "
                   f"largest coefficient: {names[j]!r}")
