"""Longitudinal treatment-initiation data: containers, validation and CSV I/O.

Data are stored densely as (patient x month) arrays over a common grid of
consecutive months; entries outside a patient's follow-up are NaN.  The
record types :class:`MonthRow` and :class:`PatientRecord` are views built on
demand for code that prefers to walk patients one at a time.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "DataError",
    "MonthRow",
    "PatientRecord",
    "LongitudinalDataset",
    "ingest_csv",
    "emit_csv",
    "at_risk",
]

BASE_COLUMNS = ("id", "month", "a", "y")


class DataError(ValueError):
    """Raised for malformed or invalid longitudinal data."""


@dataclass(frozen=True)
class MonthRow:
    m: int
    y: float
    covariates: dict
    a: int


@dataclass(frozen=True)
class PatientRecord:
    id: object
    start_month: int
    months: tuple
    T: int
    censor_month: int | None

    @property
    def last_month(self) -> int:
        return self.months[-1].m

    def row(self, m: int) -> MonthRow:
        j = m - self.start_month
        if j < 0 or j >= len(self.months):
            raise KeyError(f"patient {self.id!r} not observed at month {m}")
        return self.months[j]


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Dense panel of patients followed on a common monthly grid.

    Parameters
    ----------
    ids : ndarray, shape (n,)
        Patient identifiers (strings).
    months : ndarray, shape (M,)
        Consecutive calendar months covered by the grid.
    y : ndarray, shape (n, M)
        Outcome; NaN outside follow-up.
    covariates : dict of str -> ndarray (n, M)
        Time-varying covariates in schema order; NaN outside follow-up.
    start_month, last_month : ndarray, shape (n,)
        First and last observed month per patient.
    treatment_month : ndarray, shape (n,)
        Month treatment was initiated, ``K + 1`` if never.
    K : int
        Last month at which treatment can be initiated.
    window : int
        Length of the outcome window, k = m+1, ..., m+window.
    """

    ids: np.ndarray
    months: np.ndarray
    y: np.ndarray
    covariates: dict
    start_month: np.ndarray
    last_month: np.ndarray
    treatment_month: np.ndarray
    K: int
    window: int = 12
    schema: tuple = field(default=())

    def __post_init__(self):
        if not self.schema:
            object.__setattr__(self, "schema", tuple(self.covariates))
        for name in ("ids", "months", "y", "start_month", "last_month", "treatment_month"):
            arr = getattr(self, name)
            if isinstance(arr, np.ndarray):
                arr.flags.writeable = False
        for arr in self.covariates.values():
            arr.flags.writeable = False
        self._validate()

    def _validate(self):
        n = len(self.ids)
        if self.y.shape != (n, len(self.months)):
            raise DataError("outcome array does not match (patients, months)")
        if len(self.months) and np.any(np.diff(self.months) != 1):
            raise DataError("month grid must be consecutive")
        if set(self.covariates) != set(self.schema):
            raise DataError("covariates do not match schema")
        if self.window < 1:
            raise DataError("outcome window must contain at least one month")
        if n and np.any(self.start_month > self.K):
            bad = self.ids[np.argmax(self.start_month > self.K)]
            raise DataError(f"patient {bad!r} starts after the last decision month K={self.K}")
        if n and np.any(self.treatment_month > self.K + 1):
            raise DataError("treatment month beyond K + 1")

    # -- shape and index helpers -------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def first_month(self) -> int:
        return int(self.months[0])

    @property
    def end_month(self) -> int:
        """Last month of the study grid."""
        return int(self.months[-1])

    def col(self, m):
        return np.asarray(m) - self.first_month

    @property
    def never(self) -> int:
        return self.K + 1

    @property
    def treated(self) -> np.ndarray:
        """Boolean mask of patients who initiated treatment."""
        return self.treatment_month <= self.K

    @property
    def censor_month(self) -> np.ndarray:
        """First unobserved month; ``end_month + 1`` means uncensored."""
        return self.last_month + 1

    @property
    def censored(self) -> np.ndarray:
        return self.last_month < self.end_month

    @property
    def a(self) -> np.ndarray:
        """Treatment indicators A_m, shape (n, M); NaN outside follow-up."""
        out = ((self.months[None, :] >= self.treatment_month[:, None]) & self.treated[:, None]).astype(float)
        out[np.isnan(self.y)] = np.nan
        return out

    def observed(self, m) -> np.ndarray:
        m = np.asarray(m)
        return (self.start_month <= m) & (self.last_month >= m)

    def decision_months(self) -> np.ndarray:
        return np.arange(self.first_month, self.K + 1)

    def outcome_window(self) -> list[tuple[int, int]]:
        """All (m, k) pairs with m a decision month and k in the window and on the grid."""
        return [
            (int(m), int(k))
            for m in self.decision_months()
            for k in range(m + 1, min(m + self.window, self.end_month) + 1)
        ]

    # -- record views --------------------------------------------------------

    def patient(self, i: int) -> PatientRecord:
        s, e = int(self.start_month[i]), int(self.last_month[i])
        rows = []
        for m in range(s, e + 1):
            j = m - self.first_month
            covs = {c: float(self.covariates[c][i, j]) for c in self.schema}
            rows.append(MonthRow(m, float(self.y[i, j]), covs, int(self.treated[i] and m >= self.treatment_month[i])))
        censor = e + 1 if e < self.end_month else None
        return PatientRecord(self.ids[i], s, tuple(rows), int(self.treatment_month[i]), censor)

    @property
    def patients(self) -> list[PatientRecord]:
        return [self.patient(i) for i in range(self.n)]

    def __iter__(self) -> Iterator[PatientRecord]:
        return (self.patient(i) for i in range(self.n))

    def __len__(self):
        return self.n

    def subset(self, index) -> "LongitudinalDataset":
        """Dataset restricted to (or resampled by) the patient positions ``index``."""
        index = np.asarray(index)
        return LongitudinalDataset(
            ids=self.ids[index],
            months=self.months,
            y=self.y[index],
            covariates={c: v[index] for c, v in self.covariates.items()},
            start_month=self.start_month[index],
            last_month=self.last_month[index],
            treatment_month=self.treatment_month[index],
            K=self.K,
            window=self.window,
            schema=self.schema,
        )

    def __eq__(self, other):
        if not isinstance(other, LongitudinalDataset):
            return NotImplemented
        same = (
            self.K == other.K
            and self.window == other.window
            and self.schema == other.schema
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.months, other.months)
            and np.array_equal(self.start_month, other.start_month)
            and np.array_equal(self.last_month, other.last_month)
            and np.array_equal(self.treatment_month, other.treatment_month)
            and np.array_equal(self.y, other.y, equal_nan=True)
        )
        return same and all(
            np.array_equal(self.covariates[c], other.covariates[c], equal_nan=True)
            for c in self.schema
        )

    __hash__ = None

    @classmethod
    def from_arrays(cls, y, covariates, treatment_month, K, first_month=0, last_month=None,
                    ids=None, window=12):
        """Build a dataset with all patients starting at ``first_month``."""
        y = np.asarray(y, dtype=float)
        n, M = y.shape
        months = np.arange(first_month, first_month + M)
        if last_month is None:
            last_month = np.full(n, months[-1])
        last_month = np.asarray(last_month, dtype=int)
        y = y.copy()
        covariates = {c: np.asarray(v, dtype=float).copy() for c, v in covariates.items()}
        beyond = months[None, :] > last_month[:, None]
        y[beyond] = np.nan
        for v in covariates.values():
            v[beyond] = np.nan
        if ids is None:
            ids = np.array([str(i) for i in range(n)], dtype=object)
        return cls(
            ids=np.asarray(ids, dtype=object),
            months=months,
            y=y,
            covariates=covariates,
            start_month=np.full(n, first_month),
            last_month=last_month,
            treatment_month=np.asarray(treatment_month, dtype=int),
            K=K,
            window=window,
        )


def at_risk(ds: LongitudinalDataset, m: int) -> set:
    """Ids untreated through m-1 (T >= m) and still in follow-up at m."""
    mask = (ds.treatment_month >= m) & ds.observed(m)
    return set(ds.ids[mask])


def emit_csv(ds: LongitudinalDataset, path) -> None:
    """Write ``ds`` in long format: ``id,month,a,y,<schema covariates>``."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(BASE_COLUMNS) + list(ds.schema))
        months = ds.months
        for i in range(ds.n):
            js = np.arange(ds.start_month[i], ds.last_month[i] + 1) - ds.first_month
            T = ds.treatment_month[i] if ds.treatment_month[i] <= ds.K else np.inf
            for j in js:
                m = int(months[j])
                row = [ds.ids[i], m, int(m >= T), repr(float(ds.y[i, j]))]
                row += [repr(float(ds.covariates[c][i, j])) for c in ds.schema]
                writer.writerow(row)


def ingest_csv(path, schema: Sequence[str], K: int | None = None, window: int = 12) -> LongitudinalDataset:
    """Read a long-format CSV written by :func:`emit_csv` (or compatible).

    ``K`` defaults to the last month in the file minus one, so that the
    final month is an outcome-only month.  Rows are sorted by (id, month).
    """
    path = Path(path)
    schema = tuple(schema)
    with path.open(encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise DataError(f"{path}: empty file (no header)")
    expected = list(BASE_COLUMNS) + list(schema)
    if header != expected:
        raise DataError(f"{path}: header {header} does not match expected {expected}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.ParserError as exc:
        raise DataError(f"{path}: parse error: {exc}") from None

    if raw.empty:
        return LongitudinalDataset(
            ids=np.array([], dtype=object), months=np.arange(0, 1), y=np.empty((0, 1)),
            covariates={c: np.empty((0, 1)) for c in schema},
            start_month=np.array([], dtype=int), last_month=np.array([], dtype=int),
            treatment_month=np.array([], dtype=int), K=0 if K is None else K,
            window=window, schema=schema,
        )

    numeric = {}
    for col in expected[1:]:
        values = pd.to_numeric(raw[col], errors="coerce")
        bad = values.isna() | ~np.isfinite(values)
        if bad.any():
            line = int(np.argmax(bad.to_numpy())) + 2
            raise DataError(f"{path}: line {line}: malformed value {raw[col].iloc[line - 2]!r} in column {col!r}")
        # pandas' fast parser can be off by one ulp; Python's float() round-trips repr exactly
        numeric[col] = np.array([float(v) for v in raw[col].to_numpy()])
    month = numeric["month"]
    a = numeric["a"]
    for name, vals in (("month", month), ("a", a)):
        frac = vals != np.round(vals)
        if frac.any():
            line = int(np.argmax(frac)) + 2
            raise DataError(f"{path}: line {line}: column {name!r} must be an integer")
    if not np.isin(a, (0, 1)).all():
        line = int(np.argmax(~np.isin(a, (0, 1)))) + 2
        raise DataError(f"{path}: line {line}: treatment indicator must be 0 or 1")

    frame = pd.DataFrame({"id": raw["id"].to_numpy(), "month": month.astype(int), "a": a.astype(int),
                          "y": numeric["y"], **{c: numeric[c] for c in schema}})
    frame = frame.sort_values(["id", "month"], kind="stable").reset_index(drop=True)
    if frame.duplicated(["id", "month"]).any():
        dup = frame.loc[frame.duplicated(["id", "month"]), "id"].iloc[0]
        raise DataError(f"patient {dup!r}: duplicated month")

    first, last = int(frame["month"].min()), int(frame["month"].max())
    if K is None:
        K = max(first, last - 1)
    months = np.arange(first, last + 1)
    ids, codes = np.unique(frame["id"].to_numpy(), return_inverse=True)
    n, M = len(ids), len(months)
    cols = frame["month"].to_numpy() - first

    start = np.full(n, last + 1)
    np.minimum.at(start, codes, frame["month"].to_numpy())
    stop = np.full(n, first - 1)
    np.maximum.at(stop, codes, frame["month"].to_numpy())
    counts = np.bincount(codes, minlength=n)
    gaps = counts != stop - start + 1
    if gaps.any():
        raise DataError(f"patient {ids[np.argmax(gaps)]!r}: gap in monthly records")

    # once-on treatment: a must be non-decreasing within patient
    a_sorted = frame["a"].to_numpy()
    same = codes[1:] == codes[:-1]
    drops = same & (a_sorted[1:] < a_sorted[:-1])
    if drops.any():
        raise DataError(f"patient {ids[codes[1:][drops][0]]!r}: treatment indicator switches off (must stay 1 once initiated)")

    y = np.full((n, M), np.nan)
    y[codes, cols] = frame["y"].to_numpy()
    covariates = {}
    for c in schema:
        arr = np.full((n, M), np.nan)
        arr[codes, cols] = frame[c].to_numpy()
        covariates[c] = arr

    treat = np.full(n, last + 1)
    on = a_sorted == 1
    np.minimum.at(treat, codes[on], frame["month"].to_numpy()[on])
    late = (treat <= last) & (treat > K)
    if late.any():
        raise DataError(f"patient {ids[np.argmax(late)]!r}: treatment initiated after the last decision month K={K}")
    treat = np.minimum(treat, K + 1)

    return LongitudinalDataset(
        ids=ids.astype(object), months=months, y=y, covariates=covariates,
        start_month=start, last_month=stop, treatment_month=treat, K=K,
        window=window, schema=schema,
    )
