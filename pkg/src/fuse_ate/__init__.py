"""Average treatment effect estimation that borrows strength from an
auxiliary study measuring a different, linearly linked outcome."""

__version__ = "0.1.0"

from .dgp import (AteOracle, DgpConfig, Observation, Sample, generate_by_study,
                  generate_dataset, intercept_for_log_ratio, substream, true_ate)
from .errors import (ConfigurationError, EstimationError, FuseAteError, IdentificationError,
                     IngestionError, InputError, LinkDegeneracyError, NumericalError,
                     PrecisionError, StratificationError)
from .estimators import (EstimateResult, LinkForm, LinkSpec, estimate,
                         estimate_theta_fused_known_alpha, estimate_theta_primary,
                         estimate_theta_two_stage, fit_link_regression, two_stage_outcome_fit)
from .experiments import (ExperimentGrid, ExperimentRecord, run_grid, run_rate_experiment,
                          run_replications)
from .io import ColumnMapping, ingest_csv, write_sample_csv
from .nuisance import NuisanceFit, RegressionModel, cross_fit, fit_regression, residuals
from .scores import (ScoreContext, VarianceBounds, conditional_information, oracle_context,
                     score_fused, score_joint, score_primary, variance_bound)
from .sensitivity import (COWS, SOWS, BiasEvaluation, SeverityThresholds, fused_limit,
                          misspecification_bias, scale_link_from_thresholds, sensitivity_sweep)
