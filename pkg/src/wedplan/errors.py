"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so every module raises one of these
rather than a bare ValueError when the failure is part of a contract.
"""


class WedPlanError(Exception):
    """Base class for all package errors."""


class ConfigError(WedPlanError):
    pass


class DomainError(WedPlanError, ValueError):
    pass


class ShapeError(WedPlanError, ValueError):
    pass


class AlignmentError(DomainError):
    pass


class NumericError(WedPlanError, FloatingPointError):
    """Non-finite value encountered during optimization."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DetectionError(WedPlanError):
    pass


class StorageError(WedPlanError, OSError):
    pass


class FormatError(WedPlanError):
    pass


class VersionError(FormatError):
    pass


class ProtocolError(WedPlanError):
    """Scan window arrived out of order or overlapping."""


class StateError(WedPlanError):
    """Operation not allowed in the session's current status."""
