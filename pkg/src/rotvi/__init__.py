"""Mean-field and rotated mean-field variational inference for Gaussian mixtures.

The main entry points are :func:`run_mfvi` (product measures),
:func:`run_rovi` (rotated product measures), :func:`lmc_run` (Langevin
baseline) and the closed-form calculators in :mod:`rotvi.theory`.
"""

from .errors import (
    ConfigurationError,
    InputError,
    InvariantViolation,
    NumericalError,
    SingularMapError,
    TheoremInapplicable,
)
from .lmc import LmcConfig, lmc_moment_check, lmc_run
from .mfvi import KLObjective, MfviConfig, MfviState, grad_lambda, grad_v, kl_objective, mfvi_step, run_mfvi
from .presets import get_preset, preset_names
from .quadrature import QuadratureSet, gauss_hermite, monte_carlo
from .rotation import qr_retract, random_orthogonal, rotation_grad, rotation_step, tangent_project
from .rovi import RoviConfig, RoviResult, fit_summary, run_rovi
from .target import GaussianComponent, MixtureTarget, Potential, mixture_grad, mixture_log_density, mixture_potential, sample_mixture
from .transport import Dictionary, SeparableMapParams, build_gram, map_forward, map_log_jacobian, project_lambda

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "Dictionary",
    "GaussianComponent",
    "InputError",
    "InvariantViolation",
    "KLObjective",
    "LmcConfig",
    "MfviConfig",
    "MfviState",
    "MixtureTarget",
    "NumericalError",
    "Potential",
    "QuadratureSet",
    "RoviConfig",
    "RoviResult",
    "SeparableMapParams",
    "SingularMapError",
    "TheoremInapplicable",
    "build_gram",
    "fit_summary",
    "gauss_hermite",
    "get_preset",
    "grad_lambda",
    "grad_v",
    "kl_objective",
    "lmc_moment_check",
    "lmc_run",
    "map_forward",
    "map_log_jacobian",
    "mfvi_step",
    "mixture_grad",
    "mixture_log_density",
    "mixture_potential",
    "monte_carlo",
    "preset_names",
    "project_lambda",
    "qr_retract",
    "random_orthogonal",
    "rotation_grad",
    "rotation_step",
    "run_mfvi",
    "run_rovi",
    "sample_mixture",
    "tangent_project",
]
