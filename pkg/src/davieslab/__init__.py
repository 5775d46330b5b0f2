"""Numerical laboratory for Davies' perturbation method on fractal graphs."""

__version__ = "0.1.0"

from .builders import (build_lattice, build_sierpinski, build_vicsek, fit_walk_dimension,
                       mean_exit_times, sierpinski_point)
from .config import ExperimentConfig
from .cutoff import (AnnulusSpec, csa_frontier, drive_cutoff, harmonic_cutoff, linear_cutoff,
                     sip_construct)
from .errors import (ConfigurationError, ConvergenceError, DaviesLabError, DomainError,
                     InsufficientDataError, NumericalError, PreconditionError)
from .fitting import SubGaussianFit, fit_subgaussian
from .graph import WeightedGraph, ahlfors_fit, dirichlet_energy, energy_measure
from .heat import heat_kernel, spectral_decompose
from .iteration import (DifeParams, IterationTrace, davies_iterate, dife_bound, dife_verify,
                        sr_margins, ultracontractive_bound, usg_assemble)
from .perturb import PerturbationSpec, key_inequality_margin, perturb_apply, perturbed_kernel
from .pipeline import emit_report, run_pipeline

__all__ = [
    "AnnulusSpec", "ConfigurationError", "ConvergenceError", "DaviesLabError", "DifeParams",
    "DomainError", "ExperimentConfig", "InsufficientDataError", "IterationTrace", "NumericalError",
    "PerturbationSpec", "PreconditionError", "SubGaussianFit", "WeightedGraph", "ahlfors_fit",
    "build_lattice", "build_sierpinski", "build_vicsek", "csa_frontier", "davies_iterate",
    "dife_bound", "dife_verify", "dirichlet_energy", "drive_cutoff", "emit_report",
    "energy_measure", "fit_subgaussian", "fit_walk_dimension", "harmonic_cutoff", "heat_kernel",
    "key_inequality_margin", "linear_cutoff", "mean_exit_times", "perturb_apply",
    "perturbed_kernel", "run_pipeline", "sierpinski_point", "sip_construct", "spectral_decompose",
    "sr_margins", "ultracontractive_bound", "usg_assemble",
]
