"""End-to-end estimator pipelines for the estimator menu.

=========  ====  =============================================================
menu id    form  weights q
=========  ====  =============================================================
1a / 1b    G     naive covariates at k = m + 12
2          G     Delta_m(m + 12)  (preliminary, not doubly robust)
3          G*    Delta_m(m + 12), symbolic outcome regression
4          G*    Delta_m(k), k = m+1..m+12, identity working covariance
5          G*    Gamma^m^+ Delta_m(k), empirical working covariance (optimal)
=========  ====  =============================================================

Estimators 4 and 5 centre H with an outcome regression fitted at the
estimator-3 value of psi.  A :class:`Pipeline` builds all row tables and
design matrices once per dataset; :meth:`Pipeline.run` then fits every
model for a vector of patient frequency weights, which is how bootstrap
replicates are computed without copying data.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np

from ._glm import FitError
from .blip import BlipModel, BlipParams, builtin_blip, h_design
from .data import LongitudinalDataset
from .estimators import (
    DeltaPanel,
    EstimatingEquationSystem,
    QFunction,
    SingularSystemError,
    assemble_system,
    naive_q,
    delta_panel,
    optimal_q,
    optimal_q_values,
    preliminary_q,
    solve_psi,
)
from .nuisance import (
    DEFAULT_DURATION_FEATURES,
    DEFAULT_H_FEATURES,
    DEFAULT_PRELIM_FEATURES,
    CovarianceWorkingModel,
    NuisanceFit,
    estimate_gamma,
    fit_duration_two_part,
    fit_h_regression,
)
from .propensity import (
    DEFAULT_CENSORING_FEATURES,
    DEFAULT_PROPENSITY_FEATURES,
    POSITIVITY_FLOOR,
    CensoringWeights,
    PooledLogisticModel,
    fit_pooled_logistic,
    ipcw_weights,
    propensity_rows,
)
from .rows import Rows, features, month_context, outcome_at, window_rows

__all__ = ["EstimatorConfig", "EstimatorSpec", "MENU", "EstimateResult", "EstimationError",
           "Pipeline", "run_estimator", "spec_for"]


class EstimationError(RuntimeError):
    """An estimator pipeline failed; ``stage`` names the failing step."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class EstimatorSpec:
    menu_id: str
    form: str
    q_source: str
    gamma_mode: str | None
    window_rule: str


MENU = {
    "1a": EstimatorSpec("1a", "G", "naive_a", None, "m+12"),
    "1b": EstimatorSpec("1b", "G", "naive_b", None, "m+12"),
    "2": EstimatorSpec("2", "G", "preliminary", None, "m+12"),
    "3": EstimatorSpec("3", "G_star", "preliminary", None, "m+12"),
    "4": EstimatorSpec("4", "G_star", "optimal", "identity", "full"),
    "5": EstimatorSpec("5", "G_star", "optimal", "empirical", "full"),
}
ALIASES = {"naive_a": "1a", "naive_b": "1b", "preliminary": "2", "dr_preliminary": "3",
           "dr_identity": "4", "dr_optimal": "5"}


def spec_for(menu_id) -> EstimatorSpec:
    if isinstance(menu_id, EstimatorSpec):
        return menu_id
    key = ALIASES.get(str(menu_id), str(menu_id))
    try:
        return MENU[key]
    except KeyError:
        raise ValueError(f"unknown estimator {menu_id!r}; choose from {sorted(MENU)}") from None


@dataclass(frozen=True)
class EstimatorConfig:
    blip: str = "two_param"
    propensity_features: tuple = DEFAULT_PROPENSITY_FEATURES
    censoring_features: tuple = DEFAULT_CENSORING_FEATURES
    censoring: bool = True
    positivity_floor: float = POSITIVITY_FLOOR
    prelim_features: tuple = DEFAULT_PRELIM_FEATURES
    prelim_h_features: tuple | None = None    # defaults to prelim_features
    h_features: tuple = DEFAULT_H_FEATURES
    duration_features: tuple = DEFAULT_DURATION_FEATURES
    gamma_pooling: str = "per_m"
    naive_a_terms: tuple = ("cd4", "m", "injdrug")
    naive_b_terms: tuple = ("cd4", "injdrug", "cd4_base")
    naive_outcome: str = "increase"
    theta_known: tuple | None = None
    visit_indicator: str | None = None

    def __post_init__(self):
        for name in ("propensity_features", "censoring_features", "prelim_features", "h_features",
                     "duration_features", "naive_a_terms", "naive_b_terms"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.prelim_h_features is not None:
            object.__setattr__(self, "prelim_h_features", tuple(self.prelim_h_features))

    @property
    def blip_model(self) -> BlipModel:
        return builtin_blip(self.blip)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        """Accepts flat keys or the nested ``propensity``/``censoring``/``nuisance`` sections."""
        flat = {}
        for key, value in d.items():
            if key == "propensity" and isinstance(value, dict):
                if "features" in value:
                    flat["propensity_features"] = value["features"]
                if "theta_known" in value:
                    flat["theta_known"] = value["theta_known"]
            elif key == "censoring" and isinstance(value, dict):
                if "features" in value:
                    flat["censoring_features"] = value["features"]
                if "enabled" in value:
                    flat["censoring"] = bool(value["enabled"])
                if "positivity_floor" in value:
                    flat["positivity_floor"] = float(value["positivity_floor"])
            elif key == "nuisance" and isinstance(value, dict):
                mapping = {"h_features": "h_features", "duration_features": "duration_features",
                           "prelim_features": "prelim_features", "prelim_h_features": "prelim_h_features",
                           "gamma_pooling": "gamma_pooling"}
                for k2, v2 in value.items():
                    if k2 == "gamma_mode":
                        continue    # fixed by the menu entry; accepted for completeness
                    if k2 not in mapping:
                        raise ValueError(f"unknown nuisance config key {k2!r}")
                    flat[mapping[k2]] = v2
            else:
                flat[key] = value
        known = set(cls.__dataclass_fields__)
        unknown = set(flat) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if flat.get("theta_known") is not None:
            flat["theta_known"] = tuple(float(t) for t in flat["theta_known"])
        return cls(**flat)


@dataclass
class EstimateResult:
    menu_id: str
    psi: BlipParams
    system: EstimatingEquationSystem = field(repr=False)
    rcond: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def psi_hat(self) -> np.ndarray:
        return self.psi.psi

    def sandwich(self) -> np.ndarray:
        from .inference import sandwich
        return sandwich(self.system, self.system.per_patient(self.psi.psi))


class Pipeline:
    """Cached row tables for one dataset; :meth:`run` fits for given weights."""

    def __init__(self, ds: LongitudinalDataset, config: EstimatorConfig | None = None):
        self.ds = ds
        self.config = config or EstimatorConfig()
        self.blip = self.config.blip_model
        self._starts: dict = {}

    # row tables --------------------------------------------------------------

    @cached_property
    def window(self) -> Rows:
        """All outcome-window rows with T >= m, followed through k."""
        return window_rows(self.ds)

    @cached_property
    def window_D(self) -> np.ndarray:
        return h_design(self.blip, self.ds, self.window.pid, self.window.k)

    @cached_property
    def window_y(self) -> np.ndarray:
        return outcome_at(self.ds, self.window.pid, self.window.k)

    @cached_property
    def last(self) -> np.ndarray:
        """Mask of window rows with k = m + window (the 'one year' rows)."""
        return self.window.k - self.window.m == self.ds.window

    @cached_property
    def prelim_rows(self) -> Rows:
        return self.window.take(self.last)

    @cached_property
    def prelim_cache(self) -> dict:
        return {"D": self.window_D[self.last], "y": self.window_y[self.last],
                "h_X": features(self.ds, self.prelim_rows, self.prelim_h_features),
                "prop_X": features(self.ds, self.prelim_rows, self.config.propensity_features)}

    @property
    def prelim_h_features(self) -> tuple:
        return self.config.prelim_h_features or self.config.prelim_features

    @cached_property
    def window_h_X(self) -> np.ndarray:
        return features(self.ds, self.window, self.config.h_features)

    @cached_property
    def window_cache(self) -> dict:
        return {"D": self.window_D, "y": self.window_y, "h_X": self.window_h_X,
                "prop_X": features(self.ds, self.window, self.config.propensity_features)}

    def _untreated(self, offsets, terms) -> tuple[Rows, np.ndarray]:
        rows = window_rows(self.ds, offsets=offsets, untreated_through="m")
        rows = rows.take((rows.k > rows.m + 1) & (rows.m < self.ds.K))   # structural zeros dropped
        return rows, features(self.ds, rows, terms)

    @cached_property
    def untreated_prelim(self) -> tuple[Rows, np.ndarray]:
        return self._untreated((self.ds.window,), self.config.prelim_features)

    @cached_property
    def untreated_window(self) -> tuple[Rows, np.ndarray]:
        return self._untreated(None, self.config.duration_features)

    @cached_property
    def propensity_design(self) -> tuple:
        rows, y = propensity_rows(self.ds)
        return rows, y, features(self.ds, rows, self.config.propensity_features)

    @cached_property
    def prelim_delta(self) -> tuple[np.ndarray, np.ndarray]:
        """A_m = 1 blip features and duration design on the one-year rows."""
        rows = self.prelim_rows
        init = self.blip.features(rows.m, rows.k, month_context(self.ds, rows.pid, rows.m))
        return init, features(self.ds, rows, self.config.prelim_features)

    @cached_property
    def window_panel(self) -> DeltaPanel:
        return delta_panel(self.ds, self.window, self.blip, self.ds.window, self.config.duration_features)

    def run(self, weights: np.ndarray | None = None) -> "PipelineRun":
        return PipelineRun(self, weights)

    def estimate(self, menu_id, weights: np.ndarray | None = None) -> EstimateResult:
        return self.run(weights).estimate(menu_id)


class PipelineRun:
    """Lazily fitted stages for one vector of patient weights."""

    def __init__(self, pipeline: Pipeline, weights: np.ndarray | None):
        self.pl = pipeline
        self.ds = pipeline.ds
        self.cfg = pipeline.config
        self.blip = pipeline.blip
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.full = weights is None
        self._results: dict = {}

    def _start(self, name):
        return None if self.full else self.pl._starts.get(name)

    def _remember(self, name, fit):
        if self.full and fit is not None:
            self.pl._starts[name] = fit.coef

    def _stage(self, name, fn):
        try:
            return fn()
        except (FitError, SingularSystemError, np.linalg.LinAlgError, ValueError) as exc:
            raise EstimationError(name, str(exc)) from exc

    # fitted stages -----------------------------------------------------------------

    @cached_property
    def propensity(self) -> PooledLogisticModel:
        if self.cfg.theta_known is not None:
            return PooledLogisticModel(np.asarray(self.cfg.theta_known), self.cfg.propensity_features)

        def fit():
            model = fit_pooled_logistic(self.ds, "initiation", self.cfg.propensity_features,
                                        self.weights, start=self._start("propensity"),
                                        design=self.pl.propensity_design)
            self._remember("propensity", model.fit)
            return model
        return self._stage("propensity model", fit)

    @cached_property
    def censoring(self) -> CensoringWeights | None:
        if not self.cfg.censoring or not self.ds.censored.any():
            return None

        def fit():
            model = fit_pooled_logistic(self.ds, "censoring", self.cfg.censoring_features, self.weights)
            return ipcw_weights(model, self.ds, self.cfg.positivity_floor)
        return self._stage("censoring model", fit)

    @cached_property
    def prelim_duration(self):
        rows, X = self.pl.untreated_prelim

        def fit():
            d = fit_duration_two_part(self.ds, self.blip, self.cfg.prelim_features, rows, self.weights, X,
                                      start=self._start("prelim_hurdle"))
            self._remember("prelim_hurdle", d.hurdle)
            return d
        return self._stage("preliminary duration model", fit)

    @cached_property
    def window_duration(self):
        rows, X = self.pl.untreated_window

        def fit():
            d = fit_duration_two_part(self.ds, self.blip, self.cfg.duration_features, rows, self.weights, X,
                                      start=self._start("window_hurdle"))
            self._remember("window_hurdle", d.hurdle)
            return d
        return self._stage("duration model", fit)

    @cached_property
    def prelim_h(self):
        c = self.pl.prelim_cache
        return self._stage("outcome regression", lambda: fit_h_regression(
            self.ds, self.blip, None, self.pl.prelim_h_features, self.weights, self.censoring,
            self.pl.prelim_rows, c["h_X"], y=c["y"], D=c["D"]))

    @cached_property
    def window_h(self):
        psi_tilde = self.estimate("3").psi
        return self._stage("outcome regression", lambda: fit_h_regression(
            self.ds, self.blip, psi_tilde, self.cfg.h_features, self.weights, self.censoring,
            self.pl.window, self.pl.window_h_X, y=self.pl.window_y, D=self.pl.window_D))

    @cached_property
    def gamma(self) -> CovarianceWorkingModel:
        psi_tilde = self.estimate("3").psi
        return self._stage("working covariance", lambda: estimate_gamma(
            self.ds, self.blip, psi_tilde, self.window_h, "empirical", self.pl.window, self.weights,
            self.cfg.gamma_pooling, self.pl.window_h_X))

    def q(self, spec) -> QFunction:
        spec = spec_for(spec)
        L = self.ds.window
        if spec.q_source in ("naive_a", "naive_b"):
            kind = spec.q_source[-1]
            terms = self.cfg.naive_a_terms if kind == "a" else self.cfg.naive_b_terms
            return naive_q(kind, self.blip.p, L, terms)
        if spec.q_source == "preliminary":
            return preliminary_q(self.prelim_duration, self.blip, L)
        if spec.gamma_mode == "identity":
            gamma = CovarianceWorkingModel.identity(L, self.ds.decision_months())
        else:
            gamma = self.gamma
        return optimal_q(self.window_duration, gamma, self.blip, L)

    def q_values(self, spec) -> np.ndarray:
        """q evaluated on the rows of the menu entry's estimating equations."""
        spec = spec_for(spec)
        if spec.q_source.startswith("naive"):
            rows = self.pl.prelim_rows
            return self.q(spec)(self.ds, rows)
        if spec.q_source == "preliminary":
            init, X = self.pl.prelim_delta
            return init - self.prelim_duration.predict(self.ds, self.pl.prelim_rows, X)
        if spec.gamma_mode == "identity":
            gamma = CovarianceWorkingModel.identity(self.ds.window, self.ds.decision_months())
        else:
            gamma = self.gamma
        return optimal_q_values(self.pl.window_panel, self.ds, self.window_duration, gamma)

    def nuisance(self, menu_id) -> NuisanceFit:
        spec = spec_for(menu_id)
        if spec.q_source.startswith("naive"):
            return NuisanceFit()
        if spec.q_source == "preliminary":
            return NuisanceFit(self.prelim_h if spec.form == "G_star" else None, self.prelim_duration)
        gamma = self.gamma if spec.gamma_mode == "empirical" else None
        return NuisanceFit(self.window_h, self.window_duration, gamma)

    def system(self, menu_id, q: QFunction | None = None) -> EstimatingEquationSystem:
        spec = spec_for(menu_id)
        one_year = spec.window_rule == "m+12"
        rows = self.pl.prelim_rows if one_year else self.pl.window
        cache = dict(self.pl.prelim_cache if one_year else self.pl.window_cache)
        if q is None:
            q = self.q(spec)
            cache["q"] = self._stage("q construction", lambda: self.q_values(spec))
        if spec.form == "G_star":
            h_fit = self.prelim_h if one_year else self.window_h
            outcome = "level"
        else:
            h_fit, outcome = None, self.cfg.naive_outcome
        prop = self.propensity
        censoring = self.censoring
        return self._stage("estimating equations", lambda: assemble_system(
            self.ds, self.blip, prop, q, spec.form, h_fit, censoring, rows, self.weights,
            outcome, visit=self.cfg.visit_indicator, cache=cache))

    def estimate(self, menu_id) -> EstimateResult:
        spec = spec_for(menu_id)
        if spec.menu_id in self._results:
            return self._results[spec.menu_id]
        system = self.system(spec)
        psi, rcond = self._stage("solve", lambda: solve_psi(system))
        ds = self.ds
        diagnostics = {
            "rcond": rcond,
            "n": int(ds.n if self.weights is None else self.weights.sum()),
            "terms": system.n_terms,
            "risk_set_sizes": {int(m): int(np.sum((ds.treatment_month >= m) & ds.observed(m)))
                               for m in ds.decision_months()},
            "residual": float(np.max(np.abs(system.evaluate(psi.psi)))),
        }
        result = EstimateResult(spec.menu_id, psi, system, rcond, diagnostics)
        self._results[spec.menu_id] = result
        return result


def run_estimator(ds: LongitudinalDataset, spec="5", config: EstimatorConfig | None = None,
                  weights: np.ndarray | None = None) -> EstimateResult:
    """Fit the full pipeline for one menu entry (``"1a"`` ... ``"5"`` or a descriptive alias)."""
    return Pipeline(ds, config).estimate(spec, weights)
