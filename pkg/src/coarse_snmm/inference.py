"""Sandwich variance and percentile bootstrap for psi-hat."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ._rng import stream
from .blip import BlipParams
from .data import LongitudinalDataset
from .estimators import EstimatingEquationSystem
from .pipeline import EstimationError, EstimatorConfig, Pipeline, spec_for

__all__ = ["sandwich", "bootstrap", "percentile", "BootstrapResult", "EstimationResult",
           "BootstrapFailure", "resample_counts", "MAX_FAILURE_FRACTION"]

MAX_FAILURE_FRACTION = 0.20


class BootstrapFailure(RuntimeError):
    def __init__(self, message: str, census: dict):
        super().__init__(message)
        self.census = census


def sandwich(system: EstimatingEquationSystem, G_i: np.ndarray | None = None, psi=None) -> np.ndarray:
    """A^-1 M A^-T / n with A = -dG/dpsi and M the mean outer product of G_i.

    ``G_i`` are per-patient values at psi-hat (shape n x p); by default they
    are computed from the system at ``psi``.  Frequency weights in the
    system are honoured.  Nuisance estimation is not propagated.
    """
    if G_i is None:
        if psi is None:
            raise ValueError("pass per-patient G values or psi")
        G_i = system.per_patient(psi)
    G_i = np.asarray(G_i, dtype=float)
    f = system.weights
    n = f.sum()
    M = np.einsum("i,ij,ik->jk", f, G_i, G_i) / n
    deriv = -system.A
    try:
        inv = np.linalg.inv(deriv)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("sandwich: derivative matrix is singular") from None
    V = inv @ M @ inv.T / n
    return (V + V.T) / 2


def percentile(draws: np.ndarray, q: float) -> np.ndarray:
    """Nearest-rank (type 1) percentile along axis 0."""
    draws = np.sort(np.asarray(draws, dtype=float), axis=0)
    B = draws.shape[0]
    if B == 0:
        raise ValueError("no draws")
    rank = max(int(np.ceil(q * B)), 1)
    return draws[rank - 1]


def resample_counts(n: int, rng: np.random.Generator) -> np.ndarray:
    """Multiplicities of a with-replacement resample of n patients."""
    return np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)


@dataclass
class BootstrapResult:
    B: int
    level: float
    lower: np.ndarray
    upper: np.ndarray
    draws: np.ndarray = field(repr=False)
    failures: int = 0
    census: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"B": self.B, "level": self.level, "lower": self.lower.tolist(), "upper": self.upper.tolist(),
                "failures": self.failures, "census": self.census, "seed": self.seed}


@dataclass
class EstimationResult:
    psi_hat: BlipParams
    sandwich_cov: np.ndarray
    bootstrap: BootstrapResult | None = None
    seed: int | None = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sandwich_cov))


def bootstrap(ds: LongitudinalDataset | Pipeline, spec="4", B: int = 500, seed: int = 0,
              config: EstimatorConfig | None = None, level: float = 0.95, key: tuple = ()) -> BootstrapResult:
    """Efron percentile intervals from B patient resamples.

    Each resample reruns every nuisance fit.  It is represented by patient
    multiplicities (frequency weights), which gives the same estimate as
    materialising the resampled dataset.  Draw ``b`` uses the stream
    ``(seed, *key, b)``.  Failed replicates are dropped and counted; more
    than 20% failures raises :class:`BootstrapFailure`.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    pipeline = ds if isinstance(ds, Pipeline) else Pipeline(ds, config)
    spec = spec_for(spec)
    n = pipeline.ds.n
    pipeline.estimate(spec)     # full-data fit: warm starts for the replicates
    draws, census = [], Counter()
    for b in range(B):
        counts = resample_counts(n, stream(seed, *key, b))
        try:
            draws.append(pipeline.estimate(spec, counts).psi.psi)
        except EstimationError as exc:
            census[exc.stage] += 1
    failures = B - len(draws)
    if failures > MAX_FAILURE_FRACTION * B:
        raise BootstrapFailure(f"{failures} of {B} bootstrap replicates failed: {dict(census)}", dict(census))
    draws = np.array(draws)
    alpha = (1 - level) / 2
    return BootstrapResult(B, level, percentile(draws, alpha), percentile(draws, 1 - alpha), draws,
                           failures, dict(census), seed)
