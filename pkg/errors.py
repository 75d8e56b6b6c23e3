"""Exception hierarchy shared by the simulation, analysis and pipeline layers."""
from typing import Any, Dict, Optional

from constants import EXIT_CONFIG, EXIT_FAILURE, EXIT_PLANE_MISMATCH, EXIT_STORAGE


class TwinEprError(Exception):
    """Base class; carries an exit code and machine-readable details for the CLI."""

    exit_code = EXIT_FAILURE

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self), "details": self.details}


class ConfigError(TwinEprError, ValueError):
    """Invalid or unparseable configuration."""
    exit_code = EXIT_CONFIG


class StaleConfigError(TwinEprError):
    """A frame was requested for a config whose digest no longer matches."""
    exit_code = EXIT_CONFIG


class DegenerateFrameError(TwinEprError, ValueError):
    """Frame carries too few detections to fit an envelope."""


class DimensionMismatchError(TwinEprError, ValueError):
    pass


class PlaneMismatchError(TwinEprError, ValueError):
    exit_code = EXIT_PLANE_MISMATCH


class InsufficientSamplesError(TwinEprError, ValueError):
    pass


class EmptySupportError(TwinEprError, ValueError):
    pass


class StorageError(TwinEprError):
    exit_code = EXIT_STORAGE


class ManifestError(StorageError):
    pass


class MissingFramesError(StorageError):
    pass


class CorruptFrameError(StorageError):
    pass
