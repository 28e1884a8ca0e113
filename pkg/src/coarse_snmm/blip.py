"""Linear-in-psi treatment effect (blip) models.

The blip gamma_k^m(L_m; psi) is the mean effect on the outcome at month k of
initiating treatment at month m.  Only models linear in psi are supported:
``gamma = features(m, k, covs) @ psi``.  The mimicking outcome removes the
effect of the treatment actually received,

    H_psi(k) = Y_k - gamma_k^T(L_T; psi)   if k > T,   Y_k otherwise,

and is therefore affine in psi with slope ``-h_design_row``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .data import LongitudinalDataset, PatientRecord

__all__ = [
    "BlipModel",
    "BlipParams",
    "builtin_blip",
    "blip_value",
    "mimicking_outcome",
    "h_design_row",
    "h_design",
]

FeatureFn = Callable[[np.ndarray, np.ndarray, Mapping[str, np.ndarray]], np.ndarray]


@dataclass(frozen=True)
class BlipModel:
    """Blip model with ``p`` parameters.

    ``feature_fn(m, k, covs)`` receives 1-d arrays ``m`` and ``k`` and a
    mapping of covariate arrays evaluated at month m (the outcome is
    available as ``covs["cd4"]``) and returns an ``(len(m), p)`` array.  The
    factor 1{k > m} is applied here, so feature functions need not.
    """

    p: int
    feature_fn: FeatureFn
    name: str = "custom"
    labels: tuple = ()

    def features(self, m, k, covs: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        m = np.atleast_1d(np.asarray(m, dtype=float))
        k = np.atleast_1d(np.asarray(k, dtype=float))
        m, k = np.broadcast_arrays(m, k)
        out = np.asarray(self.feature_fn(m, k, covs or {}), dtype=float).reshape(len(m), self.p)
        return out * (k > m)[:, None]


@dataclass(frozen=True)
class BlipParams:
    psi: np.ndarray

    def __post_init__(self):
        psi = np.atleast_1d(np.asarray(self.psi, dtype=float))
        if psi.ndim != 1 or not np.all(np.isfinite(psi)):
            raise ValueError("blip parameters must be a finite vector")
        object.__setattr__(self, "psi", psi)

    def __len__(self):
        return len(self.psi)

    def __add__(self, other: "BlipParams") -> "BlipParams":
        return BlipParams(self.psi + other.psi)


def _polynomial_features(degree: int) -> FeatureFn:
    def fn(m, k, covs):
        return np.column_stack([m**j * (k - m) for j in range(degree + 1)])
    return fn


def builtin_blip(kind: str) -> BlipModel:
    """``two_param``: (psi1 + psi2 m)(k-m); ``three_param`` adds psi3 m^2 (k-m)."""
    if kind == "two_param":
        return BlipModel(2, _polynomial_features(1), kind, ("k-m", "m(k-m)"))
    if kind == "three_param":
        return BlipModel(3, _polynomial_features(2), kind, ("k-m", "m(k-m)", "m^2(k-m)"))
    raise ValueError(f"unknown blip kind {kind!r}; expected 'two_param' or 'three_param'")


def _check_dims(model: BlipModel, params: BlipParams):
    if len(params) != model.p:
        raise ValueError(f"blip model has {model.p} parameters, got {len(params)}")


def blip_value(model: BlipModel, params: BlipParams, m, k, covs=None) -> float:
    _check_dims(model, params)
    return float(model.features(m, k, covs)[0] @ params.psi)


def _covs_at(patient: PatientRecord, m: int) -> dict:
    row = patient.row(m)
    return {"cd4": np.array([row.y]), "y": np.array([row.y]),
            **{c: np.array([v]) for c, v in row.covariates.items()}}


def h_design_row(model: BlipModel, patient: PatientRecord, k: int, K: int | None = None) -> np.ndarray:
    """Row D(k) with H_psi(k) = Y_k - D(k) @ psi; zero unless treatment started before k.

    ``K`` marks the never-treated sentinel ``T = K + 1``; when omitted, a
    patient counts as treated iff some observed month has ``a == 1``.
    """
    patient.row(k)
    T = patient.T
    treated = T <= K if K is not None else any(r.a for r in patient.months)
    if not treated or k <= T:
        return np.zeros(model.p)
    return model.features(T, k, _covs_at(patient, T))[0]


def mimicking_outcome(model: BlipModel, params: BlipParams, patient: PatientRecord, k: int,
                      K: int | None = None) -> float:
    _check_dims(model, params)
    y = patient.row(k).y
    return float(y - h_design_row(model, patient, k, K) @ params.psi)


def h_design(model: BlipModel, ds: LongitudinalDataset, rows: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Vectorised D(k) for patient positions ``rows`` at outcome months ``k``."""
    rows = np.asarray(rows)
    k = np.asarray(k)
    T = ds.treatment_month[rows]
    active = ds.treated[rows] & (k > T)
    out = np.zeros((len(rows), model.p))
    if active.any():
        r, t = rows[active], T[active]
        j = t - ds.first_month
        covs = {c: ds.covariates[c][r, j] for c in ds.schema}
        covs["cd4"] = ds.y[r, j]
        out[active] = model.features(t, k[active], covs)
    return out
