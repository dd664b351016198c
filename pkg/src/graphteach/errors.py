"""Exception types shared across the package."""


class GraphteachError(Exception):
    """Base class for all package errors."""


class DimensionError(GraphteachError):
    """Operand shapes are incompatible."""


class DegenerateRowError(GraphteachError):
    """A softmax row is fully masked."""


class NormalizationError(GraphteachError):
    """A vector with (near-)zero norm cannot be normalized."""


class ContractError(GraphteachError):
    """An operation was called outside its contract (e.g. non-scalar root)."""


class TopologyError(GraphteachError):
    """A graph node has no incoming edges."""


class FormatError(GraphteachError):
    """A serialized file has a bad magic, version, or structure."""


class ValidationError(GraphteachError):
    """Loaded data violates a bank or model invariant."""


class SamplingError(GraphteachError):
    """An episode cannot be sampled from the given bank."""


class ConfigError(GraphteachError):
    """A configuration value is out of range or inconsistent."""


class DivergenceError(GraphteachError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
