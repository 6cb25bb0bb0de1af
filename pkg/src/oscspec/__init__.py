"""Spectral estimation for stochastic oscillators.

Estimates the slowest complex eigenvalue/eigenfunction pairs of the
generator (backward view) and its adjoint (forward view) for
SDE-driven oscillators, directly from simulated trajectories:
box-counted transient densities are fitted with decaying sinusoids to
read off the eigenvalue, per-box least squares recovers the
eigenfunction, and an operator-residual-trained network refines it
into a smooth field.  A finite-difference route on the same operators
provides an independent cross-check.
"""

from .collocation import (BoxGrid, CollocationSets, ShortfallError,
                          generate_reference_set, generate_training_set,
                          load_points_csv, load_training_csv,
                          save_points_csv, save_training_csv)
from .density import (DensityMatrix, DivergenceError, ReferenceBox,
                      StationaryEstimate, estimate_backward,
                      estimate_forward, estimate_stationary)
from .models import (MorrisLecar4D, MorrisLecarParams, Lorenz3D,
                     NumericDomainError, OrnsteinUhlenbeck, SdeModel,
                     StuartLandau2D, apply_backward_operator,
                     apply_forward_operator, build_model,
                     check_model_derivatives, operator_coefficients,
                     ou_leading_eigenpair, ou_stationary_covariance,
                     stuart_landau_stationary)
from .pinn import (MlpParams, TrainConfig, TrainingDivergedError,
                   eval_with_derivatives, evaluate_complex, init_mlp,
                   loss_and_grad, operator_residual_mean,
                   precompute_coefficients, train)
from .simulate import (ConfigError, SimConfig, TrajectorySample,
                       run_trajectory, spawn_stream)
from .spectral import (DecayFitParams, EigenEstimate, FitResult,
                       NearOrthogonalError, RankDeficiencyError,
                       WindowError, aggregate_eigenvalue,
                       align_global_phase, design_matrix, fit_eigenvalue,
                       lemma_error_scan, parabolic_spectrum, phase_winding,
                       relative_l2_error, rescale_biorthonormal,
                       solve_eigenfunction_lsq)
from . import fdref
from .cli import emit_plot_data, load_config, run_pipeline, validate_runs

__version__ = "0.1.0"

__all__ = [
    "BoxGrid", "CollocationSets", "ShortfallError",
    "generate_reference_set", "generate_training_set",
    "load_points_csv", "load_training_csv",
    "save_points_csv", "save_training_csv",
    "DensityMatrix", "DivergenceError", "ReferenceBox",
    "StationaryEstimate", "estimate_backward", "estimate_forward",
    "estimate_stationary",
    "MorrisLecar4D", "MorrisLecarParams", "Lorenz3D", "NumericDomainError",
    "OrnsteinUhlenbeck", "SdeModel", "StuartLandau2D",
    "apply_backward_operator", "apply_forward_operator", "build_model",
    "check_model_derivatives", "operator_coefficients",
    "ou_leading_eigenpair", "ou_stationary_covariance",
    "stuart_landau_stationary",
    "MlpParams", "TrainConfig", "TrainingDivergedError",
    "eval_with_derivatives", "evaluate_complex", "init_mlp",
    "loss_and_grad", "operator_residual_mean", "precompute_coefficients",
    "train",
    "ConfigError", "SimConfig", "TrajectorySample", "run_trajectory",
    "spawn_stream",
    "DecayFitParams", "EigenEstimate", "FitResult", "NearOrthogonalError",
    "RankDeficiencyError", "WindowError", "aggregate_eigenvalue",
    "align_global_phase", "design_matrix", "fit_eigenvalue",
    "lemma_error_scan", "parabolic_spectrum", "phase_winding",
    "relative_l2_error", "rescale_biorthonormal", "solve_eigenfunction_lsq",
    "fdref",
    "emit_plot_data", "load_config", "run_pipeline", "validate_runs",
]
