"""Exception types shared across the package."""

from __future__ import annotations


class ScmppiError(Exception):
    """Base class for all package errors."""


class InvalidStateError(ScmppiError):
    """A state, control, or parameter failed validation (NaN, wrong shape, ...)."""


class UnsafeEvaluationError(ScmppiError):
    """A hard inverse barrier was evaluated at h <= 0."""


class SolverFailureError(ScmppiError):
    """The trajectory optimizer could not make progress (regularization exhausted)."""


class DegenerateBatchError(ScmppiError):
    """Every sample in a batch was capped; the weight update is undefined."""


class ConfigError(ScmppiError):
    """An experiment configuration failed schema or dimension validation."""
