"""ODE-informed regression: joint state and parameter estimation for
parametric ODE systems from sparse, noisy observations."""

from odin.errors import (
    DomainError,
    FittingError,
    IntegrationError,
    InvalidGridError,
    NumericalError,
    OdinError,
)
from odin.kernel import KernelFamily, KernelHyperparams
from odin.ode_models import ODESystem, get_system
from odin.odin_core import OdinConfig, OdinResult, fit, gp_baseline

__all__ = [
    "DomainError",
    "FittingError",
    "IntegrationError",
    "InvalidGridError",
    "KernelFamily",
    "KernelHyperparams",
    "NumericalError",
    "ODESystem",
    "OdinConfig",
    "OdinError",
    "OdinResult",
    "fit",
    "get_system",
    "gp_baseline",
]

__version__ = "0.1.0"
