"""Exception hierarchy shared across the package."""


class MddaError(Exception):
    """Base class for all package errors."""


class DimensionError(MddaError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(MddaError, ValueError):
    """A configuration or hyper-parameter is invalid."""


class NonFiniteError(MddaError, FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ProbeError(MddaError):
    """Finite-difference probing failed (non-finite loss)."""


class ImageIOError(MddaError, OSError):
    """Image file could not be read or written."""


class CheckpointError(MddaError, OSError):
    """Checkpoint file is malformed or inconsistent with its config."""


class TrainingAborted(MddaError, RuntimeError):
    """Training stopped because of a non-finite loss or gradient."""
