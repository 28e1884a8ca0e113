"""Person-month and person-month-outcome row tables.

Estimating equations, propensity models and nuisance regressions all work
on flat row tables indexed by patient position ``pid`` and months ``m``
(and ``k``).  Building them once per dataset lets bootstrap replicates
reuse the same tables with different patient weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LongitudinalDataset
from .terms import design_matrix


@dataclass(frozen=True)
class Rows:
    pid: np.ndarray
    m: np.ndarray
    k: np.ndarray | None = None

    def __len__(self):
        return len(self.pid)

    def take(self, mask) -> "Rows":
        return Rows(self.pid[mask], self.m[mask], None if self.k is None else self.k[mask])


def month_context(ds: LongitudinalDataset, pid, m, k=None) -> dict:
    """Variables available to feature terms for rows (pid, m[, k])."""
    pid = np.asarray(pid)
    m = np.asarray(m)
    j = m - ds.first_month
    ctx = {
        "cd4": ds.y[pid, j],
        "cd4_base": ds.y[pid, ds.start_month[pid] - ds.first_month],
        "m": m.astype(float),
        "a": ((m >= ds.treatment_month[pid]) & (ds.treatment_month[pid] <= ds.K)).astype(float),
    }
    for c in ds.schema:
        ctx[c] = ds.covariates[c][pid, j]
    if k is not None:
        k = np.asarray(k)
        ctx["k"] = k.astype(float)
        ctx["k_minus_m"] = (k - m).astype(float)
        ctx["k_minus_m_1"] = (k - m - 1).astype(float)
    return ctx


def features(ds: LongitudinalDataset, rows: Rows, terms) -> np.ndarray:
    return design_matrix(terms, month_context(ds, rows.pid, rows.m, rows.k), len(rows))


def decision_rows(ds: LongitudinalDataset, untreated_through: str = "m-1") -> Rows:
    """(pid, m) for decision months m with the patient in follow-up at m.

    ``untreated_through="m-1"`` keeps T >= m (the propensity risk set);
    ``"m"`` keeps T > m.
    """
    pids, ms = [], []
    for m in ds.decision_months():
        T = ds.treatment_month
        keep = ds.observed(m) & ((T >= m) if untreated_through == "m-1" else (T > m))
        idx = np.flatnonzero(keep)
        pids.append(idx)
        ms.append(np.full(len(idx), m))
    pid = np.concatenate(pids) if pids else np.array([], dtype=int)
    m = np.concatenate(ms) if ms else np.array([], dtype=int)
    order = np.lexsort((m, pid))
    return Rows(pid[order], m[order])


def window_rows(ds: LongitudinalDataset, offsets=None, untreated_through: str = "m-1") -> Rows:
    """(pid, m, k) with k = m + d for d in ``offsets``, patient followed through k."""
    base = decision_rows(ds, untreated_through)
    if offsets is None:
        offsets = range(1, ds.window + 1)
    pids, ms, ks = [], [], []
    for d in offsets:
        k = base.m + d
        keep = (k <= ds.last_month[base.pid]) & (k <= ds.end_month)
        pids.append(base.pid[keep])
        ms.append(base.m[keep])
        ks.append(k[keep])
    pid, m, k = np.concatenate(pids), np.concatenate(ms), np.concatenate(ks)
    order = np.lexsort((k, m, pid))
    return Rows(pid[order], m[order], k[order])


def outcome_at(ds: LongitudinalDataset, pid, month) -> np.ndarray:
    return ds.y[np.asarray(pid), np.asarray(month) - ds.first_month]

