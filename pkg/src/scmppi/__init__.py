"""Sampling-based MPC with embedded barrier states.

The package couples a discrete barrier state (DBaS) with two controller
families: a differential dynamic programming solver on the barrier-embedded
model, and model predictive path integral control whose sampling
distribution is steered by the barrier-state feedback gains
(safety-controlled importance sampling).
"""

from .errors import (
    ConfigError,
    DegenerateBatchError,
    InvalidStateError,
    ScmppiError,
    SolverFailureError,
    UnsafeEvaluationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateBatchError",
    "InvalidStateError",
    "ScmppiError",
    "SolverFailureError",
    "UnsafeEvaluationError",
    "__version__",
]
