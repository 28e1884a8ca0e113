"""Coarse structural nested mean models for time-dependent treatment initiation."""
from .blip import BlipModel, BlipParams, blip_value, builtin_blip, h_design_row, mimicking_outcome
from .data import DataError, LongitudinalDataset, PatientRecord, at_risk, emit_csv, ingest_csv
from .estimators import (EstimatingEquationSystem, QFunction, SingularSystemError, assemble_system,
                         naive_q, optimal_q, optimal_q_matrix, preliminary_q, solve_psi)
from .nuisance import (CovarianceWorkingModel, DurationFit, HRegressionFit, NuisanceFit, delta_vector,
                       estimate_gamma, fit_duration_two_part, fit_h_regression, homoscedasticity_diagnostic)
from .pipeline import MENU, EstimateResult, EstimationError, EstimatorConfig, Pipeline, run_estimator
from .propensity import (CensoringModel, CensoringWeights, PositivityError, PropensityModel,
                         fit_pooled_logistic, ipcw_weights, predict_p)
from .inference import (BootstrapFailure, BootstrapResult, EstimationResult, bootstrap, percentile,
                        sandwich)
from .simulator import SimulatedCohort, SimulationConfig, marginal_checks, simulate
from .study import StudyConfig, StudyReport, one_year_effect, run_study

__version__ = "0.1.0"
