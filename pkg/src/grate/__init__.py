"""Tensor completion of energy data under exact and inexact aggregation constraints."""
from ._kernels import backend_name
from .aggregation import (AggregationKind, CompoundTensor, build_compound, check_aggregation,
                          inexact_constraint_values, latent_equality_residual, selector_vectors)
from .engine import (FitConfig, FitMode, FitTrace, fit, fit_multistart, ntf_baseline, predict)
from .errors import (CapabilityError, ConvergenceError, DimensionError, DomainError, GrateError,
                     ParseError, SingularityError, StagnationError)
from .experiments import (EnergyTensorMeta, ExperimentSpec, HiddenFibers, HiddenHomes, arpec,
                          hide_fibers, hide_homes, nmse, pec, run_experiment, synth_generate)
from .tensor import (FactorModel, cpd_reconstruct, fold_mode_n, identifiability_check,
                     khatri_rao, kruskal_rank, mode_n_unfold)

__all__ = [
    "AggregationKind", "CapabilityError", "CompoundTensor", "ConvergenceError", "DimensionError",
    "DomainError", "EnergyTensorMeta", "ExperimentSpec", "FactorModel", "FitConfig", "FitMode",
    "FitTrace", "GrateError", "HiddenFibers", "HiddenHomes", "ParseError", "SingularityError",
    "StagnationError", "arpec", "backend_name", "build_compound", "check_aggregation",
    "cpd_reconstruct", "fit", "fit_multistart", "fold_mode_n", "hide_fibers", "hide_homes",
    "identifiability_check", "inexact_constraint_values", "khatri_rao", "kruskal_rank",
    "latent_equality_residual", "mode_n_unfold", "nmse", "ntf_baseline", "pec", "predict",
    "run_experiment", "selector_vectors", "synth_generate",
]

__version__ = "0.1.0"
