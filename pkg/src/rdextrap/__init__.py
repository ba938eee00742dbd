"""Structural extrapolation of regression discontinuity effects for spending referenda."""
from .dgp import DgpConfig, ReferendumDataset, draw_economy, simulate_dataset
from .equilibrium import SolverConfig, counterfactual_pair, solve_batch, solve_equilibrium
from .extrap import (
    AveCurve,
    ExtrapolationPipeline,
    binned_ave,
    extrapolation_bootstrap,
    make_grid,
    nested_bootstrap_variance,
    simulate_counterfactual_grid,
)
from .ident import PreferenceEstimator, StructuralEstimate, calibrate_location_effects
from .mle import TurnoutData, TurnoutMLE, fit_turnout, rubin_combine, turnout_log_likelihood
from .model import Economy, EquilibriumState, HouseholdType, Jurisdiction
from .rdd import RddEstimate, RddSample, RegressionDiscontinuity, fuzzy_rd_known_first_stage, sharp_rd

__version__ = "0.1.0"
