"""Estimating equations G and G* for coarse SNMMs and their solution.

For a choice of weights q_m^k(L_m) (a ``QFunction``), the per-patient
estimating function is

    G_i(psi) = sum_m sum_k q_m^k {H_psi(k) - c_m^k} 1{T >= m} {A_m - p(m)} W_{m,k},

with c = 0 for G and c = E[H_psi(k) | L_m, T >= m] for G*.  Because the
blip is linear in psi, G_i(psi) = b_i - A_i psi exactly, and the system
P_n G = 0 is solved in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .blip import BlipModel, BlipParams, h_design
from .data import LongitudinalDataset
from .nuisance import CovarianceWorkingModel, DurationFit, HRegressionFit, delta_vector
from .propensity import CensoringWeights
from .rows import Rows, features, month_context, outcome_at, window_rows
from .terms import design_matrix

__all__ = [
    "QFunction",
    "EstimatingEquationSystem",
    "SingularSystemError",
    "naive_q",
    "preliminary_q",
    "optimal_q",
    "optimal_q_matrix",
    "optimal_q_values",
    "delta_panel",
    "DeltaPanel",
    "assemble_system",
    "solve_psi",
    "NAIVE_TERMS",
]

NAIVE_TERMS = {
    "a": ("cd4", "m", "injdrug"),
    "b": ("cd4", "injdrug", "cd4_base"),
}
PINV_RTOL = 1e-10
RCOND_MIN = 1e-12


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class QFunction:
    """Vector weights q_m^k(L_m), nonzero only for offsets k - m in ``offsets``.

    ``fn(ds, rows)`` returns an array (len(rows), p) for rows whose offsets
    all lie in ``offsets``.
    """

    fn: Callable[[LongitudinalDataset, Rows], np.ndarray]
    offsets: tuple
    label: str = ""

    def __call__(self, ds: LongitudinalDataset, rows: Rows) -> np.ndarray:
        d = rows.k - rows.m
        inside = np.isin(d, self.offsets)
        if inside.all():
            out = np.asarray(self.fn(ds, rows), dtype=float)
        else:
            sub = self.fn(ds, rows.take(inside))
            out = np.zeros((len(rows), np.shape(sub)[1]))
            out[inside] = sub
        if not np.all(np.isfinite(out)):
            raise ValueError(f"q function {self.label!r} produced non-finite values")
        return out


def naive_q(kind: str, p: int | None = None, offset: int = 12, terms=None) -> QFunction:
    """q_m^{m+offset} = named covariates at m; zero for other k.

    Kind ``a`` uses (cd4_m, m, injdrug), kind ``b`` (cd4_m, injdrug, cd4 at
    the first month).  ``p`` truncates the term list for smaller blip models.
    """
    terms = tuple(terms or NAIVE_TERMS[kind])
    if p is not None:
        if p > len(terms):
            raise ValueError(f"naive q has {len(terms)} terms, blip needs {p}")
        terms = terms[:p]

    def fn(ds, rows):
        return design_matrix(terms, month_context(ds, rows.pid, rows.m, rows.k), len(rows))

    return QFunction(fn, (offset,), f"naive_{kind}")


def preliminary_q(duration: DurationFit, blip: BlipModel, offset: int = 12) -> QFunction:
    """q_m^{m+offset} = Delta_m(m + offset); zero for other k."""

    def fn(ds, rows):
        return delta_vector(duration, blip, ds, rows)

    return QFunction(fn, (offset,), "preliminary")


def optimal_q_matrix(gamma: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Solve Gamma Q = D in the minimum-norm least-squares sense.

    ``D`` stacks Delta_m(k) rows (window x p), or a batch (..., window, p).
    The block system (Gamma kron I_p) vec(Q) = vec(D) reduces to this
    because (Gamma kron I)^+ = Gamma^+ kron I.
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.size == 0:
        raise ValueError("empty outcome window")
    return np.matmul(np.linalg.pinv(gamma, rcond=PINV_RTOL, hermitian=True), D)


@dataclass(frozen=True)
class DeltaPanel:
    """Full-window rows (p, m, m+1..m+L) for each distinct (patient, m) of a row set.

    ``inv`` and ``col`` map the original rows into the (pair, offset) grid
    (``same_rows``: the original rows are the grid, in order); ``init``
    holds the A_m = 1 blip features and ``X`` the duration design.
    """

    full: Rows
    m: np.ndarray
    inv: np.ndarray
    col: np.ndarray
    init: np.ndarray
    X: np.ndarray | None
    window: int
    same_rows: bool = False

    def deltas(self, ds: LongitudinalDataset, duration: DurationFit) -> np.ndarray:
        D = self.init - duration.predict(ds, self.full, self.X)
        return D.reshape(len(self.m), self.window, -1)


def delta_panel(ds: LongitudinalDataset, rows: Rows, blip: BlipModel, window: int,
                duration_features=None) -> DeltaPanel:
    key = rows.pid * (ds.K + 2) + rows.m
    uniq, inv = np.unique(key, return_inverse=True)
    pid_u, m_u = uniq // (ds.K + 2), uniq % (ds.K + 2)
    offsets = np.arange(1, window + 1)
    full = Rows(np.repeat(pid_u, window), np.repeat(m_u, window), np.tile(offsets, len(uniq)) + np.repeat(m_u, window))
    init = blip.features(full.m, full.k, month_context(ds, full.pid, full.m))
    X = None if duration_features is None else features(ds, full, duration_features)
    col = rows.k - rows.m - 1
    same = len(rows) == len(full) and np.array_equal(inv.ravel(), np.repeat(np.arange(len(uniq)), window)) \
        and np.array_equal(col, full.k - full.m - 1)
    return DeltaPanel(full, m_u, inv.ravel(), col, init, X, window, same)


def optimal_q_values(panel: DeltaPanel, ds: LongitudinalDataset, duration: DurationFit,
                     gamma: CovarianceWorkingModel) -> np.ndarray:
    """q^opt for the rows a panel was built from (see :func:`optimal_q`)."""
    D = panel.deltas(ds, duration)
    if gamma.mode == "identity":
        Q = D
    else:
        Q = np.empty_like(D)
        for m in np.unique(panel.m):
            sel = panel.m == m
            Q[sel] = optimal_q_matrix(gamma.matrix(m), D[sel])
    if panel.same_rows:
        return Q.reshape(-1, Q.shape[2])
    return Q[panel.inv, panel.col]


def optimal_q(duration: DurationFit, gamma: CovarianceWorkingModel, blip: BlipModel,
              window: int) -> QFunction:
    """q^{opt,k}_m = row k of Gamma^m^+ [Delta_m(m+1); ...; Delta_m(m+window)].

    Delta is evaluated over the whole window for every (patient, m), also at
    months the patient was not followed, because q depends on L_m only.
    """

    def fn(ds, rows):
        panel = delta_panel(ds, rows, blip, window, duration.features)
        return optimal_q_values(panel, ds, duration, gamma)

    return QFunction(fn, tuple(range(1, window + 1)), f"optimal_{gamma.mode}")


@dataclass(frozen=True)
class EstimatingEquationSystem:
    """P_n G(psi) = b - A psi with per-patient terms G_i(psi) = b_i - A_i psi.

    ``weights`` are per-patient frequency weights; A and b are weighted means.
    """

    A: np.ndarray
    b: np.ndarray
    A_i: np.ndarray = field(repr=False)
    b_i: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    n_terms: int = 0

    @property
    def p(self) -> int:
        return len(self.b)

    def evaluate(self, psi) -> np.ndarray:
        return self.b - self.A @ np.asarray(psi, dtype=float)

    def per_patient(self, psi) -> np.ndarray:
        return self.b_i - self.A_i @ np.asarray(psi, dtype=float)


def _patient_sums(pid: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:])
    if len(pid) == 0:
        return out
    if np.all(pid[1:] >= pid[:-1]):      # row tables are sorted by patient
        pid_s, vals = pid, values
    else:
        order = np.argsort(pid, kind="stable")
        pid_s, vals = pid[order], values[order]
    starts = np.flatnonzero(np.r_[True, pid_s[1:] != pid_s[:-1]])
    out[pid_s[starts]] = np.add.reduceat(vals, starts, axis=0)
    return out


def assemble_system(ds: LongitudinalDataset, blip: BlipModel, prop, q: QFunction, form: str = "G",
                    h_fit: HRegressionFit | None = None, weights: CensoringWeights | None = None,
                    rows: Rows | None = None, patient_weights: np.ndarray | None = None,
                    outcome: str = "level", psi_center=None, visit: str | None = None,
                    cache: dict | None = None) -> EstimatingEquationSystem:
    """Build the affine decomposition of P_n G or P_n G*.

    Parameters
    ----------
    prop : PooledLogisticModel or callable(ds, rows) -> probabilities
        Propensity p(m) evaluated on (pid, m).
    form : {"G", "G_star"}
    h_fit : HRegressionFit
        Required for G*.  Symbolic fits keep the centering affine in psi;
        plug-in fits give a fixed centering.
    outcome : {"level", "increase"}
        "increase" replaces Y_k by Y_k - Y_m.
    visit : str, optional
        Name of a 0/1 covariate multiplying each month-m term.
    cache : dict, optional
        Precomputed row arrays: ``D``, ``y``, ``h_X`` (outcome-regression
        design), ``prop_X`` (propensity design) and ``q`` (q values, used
        instead of calling ``q``).
    """
    if form not in ("G", "G_star"):
        raise ValueError(f"form must be 'G' or 'G_star', not {form!r}")
    if form == "G_star" and h_fit is None:
        raise ValueError("G* requires an outcome regression (h_fit)")
    cache = cache or {}
    if rows is None:
        rows = window_rows(ds, offsets=q.offsets)
    qv = cache["q"] if "q" in cache else q(ds, rows)
    p = blip.p
    if qv.shape[1] != p:
        raise ValueError(f"q has dimension {qv.shape[1]} but the blip model has {p} parameters")
    D = cache["D"] if "D" in cache else h_design(blip, ds, rows.pid, rows.k)
    y = cache["y"] if "y" in cache else outcome_at(ds, rows.pid, rows.k)
    if outcome == "increase":
        y = y - outcome_at(ds, rows.pid, rows.m)
    elif outcome != "level":
        raise ValueError("outcome must be 'level' or 'increase'")
    a = (ds.treatment_month[rows.pid] == rows.m).astype(float)
    if callable(prop) and not hasattr(prop, "predict_rows"):
        pm = prop(ds, rows)
    elif "prop_X" in cache:
        pm = prop.predict_X(cache["prop_X"])
    else:
        pm = prop.predict_rows(ds, rows)
    e = a - pm
    if weights is not None:
        e = e * weights.lookup(rows.pid, rows.m, rows.k)
    if visit is not None:
        e = e * ds.covariates[visit][rows.pid, rows.m - ds.first_month]
    if form == "G_star":
        mean_y, mean_d = h_fit.predict(ds, rows, cache.get("h_X"))
        y = y - mean_y
        if mean_d is not None:
            D = D - mean_d
    qe = qv * e[:, None]
    rows_ab = np.empty((len(qe), p + p * p))      # [q e y | (q e) outer D], row-major in (j, l)
    rows_ab[:, :p] = qe * y[:, None]
    for j in range(p):
        rows_ab[:, p + j * p:p + (j + 1) * p] = qe[:, j:j + 1] * D
    sums = _patient_sums(rows.pid, rows_ab, ds.n)
    b_i, A_i = sums[:, :p], sums[:, p:].reshape(ds.n, p, p)
    f = np.ones(ds.n) if patient_weights is None else np.asarray(patient_weights, dtype=float)
    total = f.sum()
    ab = f @ sums / total
    b, A = ab[:p], ab[p:].reshape(p, p)
    return EstimatingEquationSystem(A, b, A_i, b_i, f, len(rows))


def solve_psi(system: EstimatingEquationSystem) -> tuple[BlipParams, float]:
    """Solve A psi = b by column-pivoted QR; returns (psi, reciprocal condition number)."""
    A, b = system.A, system.b
    if A.shape != (len(b), len(b)):
        raise ValueError("estimating-equation matrix must be square")
    sv = np.linalg.svd(A, compute_uv=False)
    rcond = float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0
    if not np.isfinite(rcond) or rcond < RCOND_MIN:
        raise SingularSystemError(
            f"unidentified: estimating-equation matrix singular (rcond={rcond:.3g})"
        )
    Q, R, piv = scipy.linalg.qr(A, pivoting=True)
    z = scipy.linalg.solve_triangular(R, Q.T @ b)
    psi = np.empty_like(z)
    psi[piv] = z
    return BlipParams(psi), rcond
