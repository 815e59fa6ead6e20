"""Empirical-Bayes estimation of unit means, scales, and quantiles under unknown heteroskedasticity."""

from .core import (Dataset, SufficientStats, UnitObservations, UnitTruth,
                   compute_sufficient_stats)
from .dgp import (DgpSpec, MomentTargets, calibrate_dgp, draw_observations,
                  draw_parameters)
from .estimators import (EstimatorConfig, UnitEstimates, estimate_all_units_het,
                         estimate_all_units_hom, estimate_all_units_naive,
                         estimate_mu, estimate_quantile, estimate_sigma,
                         estimate_sigma2)
from .mixture import (DiscreteMixture, MixtureAtom, component_density,
                      log_likelihood, mixture_density, mixture_density_dy,
                      tail_integrals)
from .npmle import NpmleFit, SieveConfig, build_sieve_grid, fit_loo_npmle, fit_npmle
from .oracle import OracleSpec, oracle_estimates, oracle_posterior
from .risk import (RegretReport, detection_loss, flag_below_threshold, mse_loss,
                   relative_regret)
from .simulation import ExperimentResult, ExperimentSpec, run_experiment

__version__ = "0.1.0"
