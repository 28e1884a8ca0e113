"""Monte-Carlo studies: simulate, estimate, summarise.

Replicate ``r`` simulates with stream key ``(1, r)`` and bootstraps with
``(2, r, b)`` under the study seed, so results do not depend on the number
of worker processes.
"""
from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .blip import builtin_blip
from .inference import BootstrapFailure, bootstrap, sandwich
from .pipeline import EstimationError, EstimatorConfig, Pipeline, spec_for
from .simulator import SimulationConfig, simulate

__all__ = ["StudyConfig", "StudyReport", "run_study", "one_year_effect", "FAILURE_FLAG_FRACTION"]

FAILURE_FLAG_FRACTION = 0.10


@dataclass(frozen=True)
class StudyConfig:
    replicates: int = 200
    n: int = 2000
    estimators: tuple = ("2", "3", "4", "5")
    blip: str = "two_param"
    simulation: dict = field(default_factory=dict)      # SimulationConfig overrides
    estimation: dict = field(default_factory=dict)      # EstimatorConfig overrides
    drop_cd4_from_propensity: bool = False
    corrupt_h_regression: bool = False
    oracle_theta: bool = False                           # plug in the true propensity
    bootstrap_B: int = 0
    bootstrap_estimators: tuple | None = None            # default: all estimators
    level: float = 0.95
    seed: int = 0
    workers: int = 1
    out_csv: str | None = None
    out_effects_csv: str | None = None
    out_json: str | None = None

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.n < 1:
            raise ValueError("n must be at least 1")
        object.__setattr__(self, "estimators", tuple(spec_for(e).menu_id for e in self.estimators))
        if self.bootstrap_estimators is not None:
            object.__setattr__(self, "bootstrap_estimators",
                               tuple(spec_for(e).menu_id for e in self.bootstrap_estimators))
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        builtin_blip(self.blip)
        self.simulation_config(0)
        self.estimator_config()

    def simulation_config(self, replicate: int) -> SimulationConfig:
        base = SimulationConfig.from_dict(dict(self.simulation))
        return replace(base, n=self.n, seed=self.seed, stream_key=(1, replicate))

    def estimator_config(self) -> EstimatorConfig:
        cfg = EstimatorConfig.from_dict({"blip": self.blip, **dict(self.estimation)})
        changes = {}
        if self.drop_cd4_from_propensity:
            changes["propensity_features"] = tuple(
                t for t in cfg.propensity_features if "cd4" not in t.split("*") and t != "y")
        if self.corrupt_h_regression:
            changes["h_features"] = ("1",)
            changes["prelim_h_features"] = ("1",)
        if self.oracle_theta:
            sim = self.simulation_config(0)
            changes["theta_known"] = sim.theta_true
            changes["propensity_features"] = ("1", "injdrug", "cd4", "m")
        return replace(cfg, **changes)

    def truth(self) -> np.ndarray:
        p = builtin_blip(self.blip).p
        psi = np.zeros(p)
        given = self.simulation_config(0).psi_true
        psi[:min(p, len(given))] = given[:p]
        return psi

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown study config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("estimators", "bootstrap_estimators"):
            if d.get(key) is not None:
                d[key] = tuple(str(e) for e in d[key])
        return cls(**d)


def one_year_effect(psi, months) -> np.ndarray:
    """12 x blip slope at each initiation month: 12 * sum_j psi_j m^j."""
    psi = np.asarray(psi, dtype=float)
    months = np.asarray(months, dtype=float)
    powers = months[..., None] ** np.arange(psi.shape[-1])
    return 12.0 * np.einsum("...j,mj->...m", psi, powers)


def _replicate(args):
    """Estimates for one replicate: {menu_id: dict}."""
    config, r = args
    cohort = simulate(config.simulation_config(r))
    pipeline = Pipeline(cohort.observed, config.estimator_config())
    run = pipeline.run()
    out = {}
    boot_for = config.bootstrap_estimators or config.estimators
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for menu_id in config.estimators:
            rec = {"psi": None, "se": None, "ci": None, "failure": None, "boot_failures": 0, "residual": None}
            try:
                res = run.estimate(menu_id)
                rec["psi"] = res.psi.psi.copy()
                rec["residual"] = (res.diagnostics["residual"], float(np.max(np.abs(res.system.b))))
                rec["se"] = np.sqrt(np.clip(np.diag(sandwich(res.system, psi=res.psi.psi)), 0, None))
            except (EstimationError, np.linalg.LinAlgError) as exc:
                rec["failure"] = getattr(exc, "stage", "sandwich")
                out[menu_id] = rec
                continue
            if config.bootstrap_B and menu_id in boot_for:
                try:
                    b = bootstrap(pipeline, menu_id, config.bootstrap_B, config.seed, level=config.level, key=(2, r))
                    rec["ci"] = np.vstack([b.lower, b.upper])
                    rec["boot_failures"] = b.failures
                except BootstrapFailure:
                    rec["failure"] = "bootstrap"
            out[menu_id] = rec
    return out


@dataclass
class StudyReport:
    config: StudyConfig
    truth: np.ndarray
    estimates: dict        # menu_id -> (R, p) with NaN rows for failures
    ses: dict              # menu_id -> (R, p) sandwich standard errors
    cis: dict              # menu_id -> (R, 2, p) bootstrap percentile intervals (NaN if not run)
    failures: dict         # menu_id -> {stage: count}
    runtime: float
    residuals: dict = field(default_factory=dict)   # menu_id -> (R, 2): |P_n G(psi-hat)|_inf, |b|_inf

    @property
    def months(self) -> np.ndarray:
        sim = self.config.simulation_config(0)
        return np.arange(sim.first_month, sim.last_initiation_month + 1)

    def summary(self, menu_id) -> dict:
        """Per-parameter bias, SD (divisor R), RMSE, MCSE of the mean, mean SE and coverage."""
        est = self.estimates[menu_id]
        ok = ~np.isnan(est).any(axis=1)
        e = est[ok]
        R = len(e)
        z = _normal_quantile(0.5 + self.config.level / 2)
        if R == 0:
            nan = np.full(len(self.truth), np.nan)
            return {"n_ok": 0, "mean": nan, "bias": nan, "sd": nan, "rmse": nan, "mcse": nan,
                    "mean_se": nan, "coverage": nan, "coverage_method": "none"}
        mean = e.mean(axis=0)
        sd = e.std(axis=0)              # divisor R so that RMSE^2 = bias^2 + SD^2 exactly
        bias = mean - self.truth
        rmse = np.sqrt(np.mean((e - self.truth) ** 2, axis=0))
        se = self.ses[menu_id][ok]
        ci = self.cis[menu_id][ok]
        if not np.isnan(ci).all():
            have = ~np.isnan(ci).any(axis=(1, 2))
            cover = ((ci[have, 0] <= self.truth) & (self.truth <= ci[have, 1])).mean(axis=0)
            method = "bootstrap_percentile"
        else:
            cover = (np.abs(e - self.truth) <= z * se).mean(axis=0)
            method = "sandwich_wald"
        return {"n_ok": R, "mean": mean, "bias": bias, "sd": sd, "rmse": rmse,
                "mcse": e.std(axis=0, ddof=1) / np.sqrt(R) if R > 1 else np.full(len(mean), np.nan),
                "mean_se": se.mean(axis=0), "coverage": cover, "coverage_method": method}

    def flagged(self) -> list[str]:
        R = self.config.replicates
        return [m for m, f in self.failures.items() if sum(f.values()) > FAILURE_FLAG_FRACTION * R]

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "parameter", "truth", "mean", "bias", "sd", "rmse", "mcse", "mean_se",
                    "coverage", "coverage_method", "replicates", "failures", "flagged"])
        flagged = set(self.flagged())
        for menu_id in self.config.estimators:
            s = self.summary(menu_id)
            for j in range(len(self.truth)):
                w.writerow([menu_id, f"psi{j + 1}", repr(float(self.truth[j])), repr(float(s["mean"][j])),
                            repr(float(s["bias"][j])), repr(float(s["sd"][j])), repr(float(s["rmse"][j])),
                            repr(float(s["mcse"][j])), repr(float(s["mean_se"][j])),
                            repr(float(s["coverage"][j])), s["coverage_method"], s["n_ok"],
                            sum(self.failures[menu_id].values()), int(menu_id in flagged)])
        return buf.getvalue()

    def effects_csv(self) -> str:
        months = self.months
        truth = one_year_effect(self.truth, months)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "month", "truth", "mean", "bias", "sd", "rmse"])
        for menu_id in self.config.estimators:
            est = self.estimates[menu_id]
            est = est[~np.isnan(est).any(axis=1)]
            eff = one_year_effect(est, months) if len(est) else np.full((0, len(months)), np.nan)
            for i, m in enumerate(months):
                col = eff[:, i]
                mean = col.mean() if len(col) else np.nan
                sd = col.std() if len(col) else np.nan
                rmse = np.sqrt(np.mean((col - truth[i]) ** 2)) if len(col) else np.nan
                w.writerow([menu_id, int(m), repr(float(truth[i])), repr(float(mean)),
                            repr(float(mean - truth[i])), repr(float(sd)), repr(float(rmse))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        out = {"config": self.config.to_dict(), "truth": self.truth.tolist(), "runtime_seconds": self.runtime,
               "flagged": self.flagged(), "estimators": {}}
        for menu_id in self.config.estimators:
            s = self.summary(menu_id)
            out["estimators"][menu_id] = {
                k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in s.items()}
            out["estimators"][menu_id]["failures"] = self.failures[menu_id]
        return out


def _normal_quantile(p: float) -> float:
    from scipy.stats import norm
    return float(norm.ppf(p))


def run_study(config: StudyConfig, progress=None) -> StudyReport:
    """Run all replicates (in a process pool when ``workers > 1``) and summarise."""
    start = time.perf_counter()
    tasks = [(config, r) for r in range(config.replicates)]
    if config.workers > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(config.workers) as pool:
            results = list(pool.imap(_replicate, tasks))
    else:
        results = []
        for i, task in enumerate(tasks):
            results.append(_replicate(task))
            if progress is not None:
                progress(i + 1, len(tasks))
    truth = config.truth()
    p = len(truth)
    R = config.replicates
    estimates, ses, cis, failures, residuals = {}, {}, {}, {}, {}
    for menu_id in config.estimators:
        est = np.full((R, p), np.nan)
        se = np.full((R, p), np.nan)
        ci = np.full((R, 2, p), np.nan)
        resid = np.full((R, 2), np.nan)
        census: dict = {}
        for r, res in enumerate(results):
            rec = res[menu_id]
            if rec["failure"] is not None:
                census[rec["failure"]] = census.get(rec["failure"], 0) + 1
            if rec["psi"] is not None and rec["failure"] is None:
                est[r], se[r] = rec["psi"], rec["se"]
                resid[r] = rec["residual"]
                if rec["ci"] is not None:
                    ci[r] = rec["ci"]
        estimates[menu_id], ses[menu_id], cis[menu_id], failures[menu_id] = est, se, ci, census
        residuals[menu_id] = resid
    report = StudyReport(config, truth, estimates, ses, cis, failures, time.perf_counter() - start, residuals)
    if config.out_csv:
        with open(config.out_csv, "w", newline="") as fh:
            fh.write(report.table_csv())
    if config.out_effects_csv:
        with open(config.out_effects_csv, "w", newline="") as fh:
            fh.write(report.effects_csv())
    if config.out_json:
        import json
        with open(config.out_json, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    return report
