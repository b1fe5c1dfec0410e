"""Rollout kernel backends.

Two interchangeable implementations of ``rollout_batch`` exist: a compiled
Cython core and a pure-numpy reference. The compiled one is used when it
imported cleanly; ``SCMPPI_KERNEL=reference|cython`` (or an explicit name
passed to :func:`get_backend`) overrides the choice.
"""

from __future__ import annotations

import os

from ..errors import ConfigError
from . import reference

_BACKENDS = {"reference": reference}

try:
    from . import _core

    _BACKENDS["cython"] = _core
    _DEFAULT = "cython"
except ImportError:  # extension not built; the reference backend always works
    _DEFAULT = "reference"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def default_backend_name() -> str:
    return os.environ.get("SCMPPI_KERNEL", _DEFAULT)


def get_backend(name: str | None = None):
    """Return the kernel module selected by name, env var, or default."""
    chosen = name or default_backend_name()
    if chosen not in _BACKENDS:
        raise ConfigError(
            f"unknown kernel backend {chosen!r}; available: {available_backends()}"
        )
    return _BACKENDS[chosen]
