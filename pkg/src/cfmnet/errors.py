"""Exception types shared across the package."""


class CFMNetError(Exception):
    """Base class for every error raised by cfmnet."""


class ShapeError(CFMNetError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(CFMNetError, ValueError):
    """A configuration value is missing, malformed or out of range."""


class DomainError(CFMNetError, ValueError):
    """A numeric argument lies outside the domain of an operation."""


class ContractError(CFMNetError, RuntimeError):
    """An API was used in a way its contract does not allow."""


class StructuralError(CFMNetError, RuntimeError):
    """A network does not have the structure an operation requires."""


class CheckpointError(CFMNetError, IOError):
    """A checkpoint file is malformed or does not match the expected model."""


class DataError(CFMNetError, IOError):
    """Input data (images, corpora) is missing or unreadable."""


class NonFiniteError(CFMNetError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""
