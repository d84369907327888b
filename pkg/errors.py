"""Typed errors shared by every stage.

The CLI maps these to exit codes (see `cli.py`); library callers can catch
the builtin base classes (`ValueError`, `ArithmeticError`, ...) as well.
"""

from __future__ import annotations


class DeidError(Exception):
    """Base class for all pipeline errors."""


class ConfigurationError(DeidError, ValueError):
    """Bad configuration, unknown identifiers or incompatible artifacts."""


class ArgumentError(DeidError, ValueError):
    """Invalid call arguments (bounds, shapes, empty inputs)."""


class NumericalError(DeidError, ArithmeticError):
    """Degenerate numerics (e.g. coincident landmarks)."""


class NonFiniteLossError(NumericalError):
    """A training loss went NaN/inf; a diagnostic checkpoint was written first."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class PreconditionError(DeidError, RuntimeError):
    """An operation was called in a state it does not accept."""


class LabelManifestError(DeidError, ValueError):
    """A manual label manifest does not cover every context entry."""

    def __init__(self, message: str, missing_ids: list[int] | None = None):
        super().__init__(message)
        self.missing_ids = list(missing_ids or [])


class NoFaceError(DeidError):
    """Typed refusal: the detector found no face in the input."""

    def __init__(self, message: str = "no face present", confidence: float | None = None):
        super().__init__(message)
        self.confidence = confidence
