"""Rank-preserving simulation of CD4 counts and treatment initiation.

Untreated CD4 counts follow an autoregressive random walk from a lognormal
month-6 value,

    Y0_{k+1} = xi + Y0_k + eps_{k+1},

with a noise standard deviation that falls linearly from 41 (month 7) to
21.5 (month 19) and stays at 21.5 afterwards.  Treatment starts at the first
month m in 6..18 at which a Bernoulli draw with

    logit p = theta1 + theta2 * injdrug + theta3 * Y0_m + theta4 * m

succeeds.  After initiation at T, every patient's CD4 is shifted by exactly
(psi1 + psi2 T)(k - T), so the blipped-down outcome equals the untreated
counterfactual for each patient, not only on average.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from ._rng import stream
from .data import LongitudinalDataset

__all__ = ["SimulationConfig", "SimulatedCohort", "simulate", "marginal_checks"]

BLOCK = 1000


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 1000
    psi_true: tuple = (25.0, -0.7)
    theta_true: tuple = (-2.4, -0.42, -0.0035, -0.026)
    xi_true: float = -10.0
    idu_fraction: float = 0.10
    baseline_non_idu: tuple = (6.0, 0.4)   # (mean, sd) of log CD4 at month 6
    baseline_idu: tuple = (6.6, 0.5)
    noise_anchors: tuple = (41.0, 21.5)    # sd of eps at months noise_months
    noise_months: tuple = (7, 19)
    first_month: int = 6
    last_month: int = 30
    last_initiation_month: int = 18
    window: int = 12
    baseline_fixed: float | None = None    # overrides the lognormal draw (testing)
    seed: int = 0
    stream_key: tuple = ()                 # extra stream indices, e.g. (replicate,)

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if not 0.0 <= self.idu_fraction <= 1.0:
            raise ValueError("idu_fraction must lie in [0, 1]")
        if min(self.noise_anchors) < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not self.first_month <= self.last_initiation_month < self.last_month:
            raise ValueError("months must satisfy first <= last initiation < last")
        if len(self.theta_true) != 4:
            raise ValueError("theta_true has four entries (intercept, injdrug, cd4, month)")
        object.__setattr__(self, "psi_true", tuple(float(v) for v in self.psi_true))
        object.__setattr__(self, "theta_true", tuple(float(v) for v in self.theta_true))
        object.__setattr__(self, "stream_key", tuple(int(v) for v in self.stream_key))

    @property
    def months(self) -> np.ndarray:
        return np.arange(self.first_month, self.last_month + 1)

    def noise_std(self, k) -> np.ndarray:
        """Standard deviation of eps_k: linear between the anchors, flat outside."""
        k = np.asarray(k, dtype=float)
        (k0, k1), (s0, s1) = self.noise_months, self.noise_anchors
        return np.interp(k, [k0, k1], [s0, s1])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SimulatedCohort:
    observed: LongitudinalDataset
    counterfactual_untreated: np.ndarray   # (n, M) Y under "never treat"
    injdrug: np.ndarray
    config: SimulationConfig = field(repr=False)

    @property
    def truth(self) -> dict:
        return {
            "psi": list(self.config.psi_true),
            "theta": list(self.config.theta_true),
            "xi": self.config.xi_true,
        }


def _simulate_block(cfg: SimulationConfig, size: int, rng: np.random.Generator):
    months = cfg.months
    M = len(months)
    idu = rng.random(size) < cfg.idu_fraction
    mu = np.where(idu, cfg.baseline_idu[0], cfg.baseline_non_idu[0])
    sd = np.where(idu, cfg.baseline_idu[1], cfg.baseline_non_idu[1])
    z = rng.standard_normal(size)
    y0 = np.empty((size, M))
    y0[:, 0] = np.exp(mu + sd * z) if cfg.baseline_fixed is None else cfg.baseline_fixed
    eps = rng.standard_normal((size, M - 1)) * cfg.noise_std(months[1:])
    y0[:, 1:] = y0[:, :1] + np.cumsum(cfg.xi_true + eps, axis=1)

    decision = np.arange(cfg.first_month, cfg.last_initiation_month + 1)
    u = rng.random((size, len(decision)))
    t1, t2, t3, t4 = cfg.theta_true
    T = np.full(size, cfg.last_initiation_month + 1)
    untreated = np.ones(size, dtype=bool)
    for j, m in enumerate(decision):
        h = expit(t1 + t2 * idu + t3 * y0[:, m - cfg.first_month] + t4 * m)
        start = untreated & (u[:, j] < h)
        T[start] = m
        untreated &= ~start
    return idu, y0, T


def _effect(cfg: SimulationConfig, T: np.ndarray, months: np.ndarray) -> np.ndarray:
    slope = sum(p * T.astype(float) ** j for j, p in enumerate(cfg.psi_true))
    gap = months[None, :] - T[:, None]
    treated = (T <= cfg.last_initiation_month)[:, None]
    return np.where(treated & (gap > 0), slope[:, None] * gap, 0.0)


def simulate(config: SimulationConfig) -> SimulatedCohort:
    """Simulate ``config.n`` patients in blocks of 1000 with independent streams."""
    cfg = config
    months = cfg.months
    parts = []
    for b, lo in enumerate(range(0, cfg.n, BLOCK)):
        parts.append(_simulate_block(cfg, min(BLOCK, cfg.n - lo), stream(cfg.seed, *cfg.stream_key, 0, b)))
    if parts:
        idu = np.concatenate([p[0] for p in parts])
        y0 = np.concatenate([p[1] for p in parts])
        T = np.concatenate([p[2] for p in parts])
    else:
        idu, y0, T = np.zeros(0, bool), np.zeros((0, len(months))), np.zeros(0, int)
    y = y0 + _effect(cfg, T, months)
    width = max(6, len(str(cfg.n)))
    ds = LongitudinalDataset.from_arrays(
        y=y,
        covariates={"injdrug": np.repeat(idu.astype(float)[:, None], len(months), axis=1)},
        treatment_month=T,
        K=cfg.last_initiation_month,
        first_month=cfg.first_month,
        ids=np.array([f"p{i:0{width}d}" for i in range(cfg.n)], dtype=object),
        window=cfg.window,
    )
    return SimulatedCohort(ds, y0, idu, cfg)


def marginal_checks(cohort: SimulatedCohort) -> dict:
    """Calibration summaries of a simulated cohort."""
    ds = cohort.observed
    idu = cohort.injdrug
    K = ds.K
    non_idu = ~idu
    base = cohort.counterfactual_untreated[:, 0]
    eligible = non_idu & (ds.treatment_month >= ds.first_month)
    return {
        "n": ds.n,
        "idu_fraction": float(idu.mean()) if ds.n else float("nan"),
        "treated_by_K_non_idu": float(np.mean(ds.treatment_month[eligible] <= K)) if eligible.any() else float("nan"),
        "treated_by_K_idu": float(np.mean(ds.treatment_month[idu] <= K)) if idu.any() else float("nan"),
        "baseline_quantiles_non_idu": np.quantile(base[non_idu], [0.1, 0.25, 0.5, 0.75, 0.9]).tolist() if non_idu.any() else [],
        "baseline_quantiles_idu": np.quantile(base[idu], [0.1, 0.25, 0.5, 0.75, 0.9]).tolist() if idu.any() else [],
        "risk_set_sizes": {int(m): int(np.sum(ds.treatment_month >= m)) for m in ds.decision_months()},
    }
