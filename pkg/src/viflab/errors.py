"""Exception hierarchy shared by every module."""


class VifError(Exception):
    """Base class for all library errors."""


class ValidationError(VifError, ValueError):
    """An input value violates a documented precondition."""


class ParameterError(ValidationError):
    """A scalar parameter (temperature, coefficient, threshold) is out of range."""


class ConfigError(VifError, ValueError):
    """A model, topology or experiment configuration is invalid."""


class SelectionError(VifError, RuntimeError):
    """Token selection could not satisfy its constraints."""


class InvariantError(VifError, AssertionError):
    """A runtime invariant check failed (row-stochasticity, profile sums)."""
