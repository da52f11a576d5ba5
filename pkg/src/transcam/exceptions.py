"""Exception types raised across the package."""


class TransCAMError(Exception):
    """Base class for package errors."""


class ShapeError(TransCAMError, ValueError):
    """Operand extents are incompatible for an operation."""


class ConfigError(TransCAMError, ValueError):
    """An attribute, hyperparameter or range is invalid."""


class ContractError(TransCAMError, ValueError):
    """A caller violated an operation precondition."""


class GraphStateError(TransCAMError, RuntimeError):
    """A recorded graph was used in an invalid state."""


class NumericError(TransCAMError, FloatingPointError):
    """A computation produced NaN or Inf."""


class CheckpointError(TransCAMError, ValueError):
    """A checkpoint file is malformed, corrupt or of an unknown version."""


class DatasetError(TransCAMError, OSError):
    """A dataset file is missing or unreadable."""
