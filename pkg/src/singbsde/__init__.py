"""Singular-terminal BSDEs for optimal liquidation.

Truncation and monotone limits, the singular expansion
Y = eta/(T-t)^(p-1) + H/(T-t)^p, Malliavin derivatives of both, and the
liquidation layer built on top of them.
"""

from .errors import (ConfigError, DomainError, InvariantViolation, KernelGuardError,
                     KernelGuardWarning, NumericalError, SingBSDEError)
from .grid import GridSpec, TimeSpaceField
from .model import ModelSpec, arctan_model, constant_model, umi_model

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DomainError", "GridSpec", "InvariantViolation", "KernelGuardError",
    "KernelGuardWarning", "ModelSpec", "NumericalError", "SingBSDEError", "TimeSpaceField",
    "arctan_model", "constant_model", "umi_model",
]
