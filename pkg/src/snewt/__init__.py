"""Online sketched Newton methods with online covariance estimation.

Library layout:

- problems: streaming regression models and noisy deterministic oracles
- sketch: sketch-and-project solvers for symmetric linear systems
- optimizer: the averaged-Hessian stochastic Newton iteration
- covariance: running covariance estimators (weighted sample covariance
  with O(d^2) state and a rank-3 inverse recursion, plus plug-in and
  batch-means baselines)
- inference: self-contained normal/chi-square quantiles, confidence
  intervals and ellipsoidal confidence regions
- oracle: ground-truth limiting covariances (closed forms where they
  exist, seeded Monte Carlo elsewhere)
- sqp: equality-constrained extension (stochastic SQP on the KKT system)
- config / experiment / cli: study configs, the replication-batched
  Monte-Carlo harness, and the ``snewt`` command-line entry point
"""

from .config import ConfigError, ExperimentConfig, parse_config
from .covariance import (BatchMeansAccumulator, PlugInAccumulator,
                         WscAccumulator, WscInverseTracker, WscSink,
                         plugin_estimate)
from .experiment import (ExperimentResult, run_experiment, sqp_empirical_xi,
                         write_aggregate_csv, write_summary_csv)
from .inference import (ConfidenceInterval, ConfidenceRegion, chi2_quantile,
                        confidence_region, directional_ci, normal_quantile)
from .optimizer import (DivergenceError, NewtonState, RngStreams,
                        StepsizeSchedule, newton_step, run)
from .oracle import OracleCovariance, omega_star, oracle_covariance, xi_star
from .problems import RegressionModel, default_x_star
from .sketch import SketchDistribution, SketchSolveConfig
from .sqp import EqConstrainedProblem, builtin_problem, run_sqp

__version__ = "0.1.0"

__all__ = [
    "BatchMeansAccumulator",
    "ConfidenceInterval",
    "ConfidenceRegion",
    "ConfigError",
    "DivergenceError",
    "EqConstrainedProblem",
    "ExperimentConfig",
    "ExperimentResult",
    "NewtonState",
    "OracleCovariance",
    "PlugInAccumulator",
    "RegressionModel",
    "RngStreams",
    "SketchDistribution",
    "SketchSolveConfig",
    "StepsizeSchedule",
    "WscAccumulator",
    "WscInverseTracker",
    "WscSink",
    "builtin_problem",
    "chi2_quantile",
    "confidence_region",
    "default_x_star",
    "directional_ci",
    "newton_step",
    "normal_quantile",
    "omega_star",
    "oracle_covariance",
    "parse_config",
    "plugin_estimate",
    "run",
    "run_experiment",
    "run_sqp",
    "sqp_empirical_xi",
    "write_aggregate_csv",
    "write_summary_csv",
    "xi_star",
    "__version__",
]
