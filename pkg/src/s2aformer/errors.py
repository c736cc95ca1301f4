"""Failure classes shared across the package.

Each maps to one observable failure mode so callers (and the CLI) can translate
them into exit codes without string matching.
"""


class S2AError(Exception):
    """Base class for all package errors."""


class DimensionError(S2AError):
    """Tensor shapes are incompatible with the requested op."""


class ParameterError(S2AError):
    """A scalar argument (rate, ratio, width, dtype) is out of range."""


class ConfigError(S2AError):
    """A variant or stage configuration is malformed."""


class ContractError(S2AError):
    """A structural guarantee failed (manifest layout, integral cost term)."""


class GraphStateError(S2AError):
    """The autodiff graph was used after being consumed."""


class NumericError(S2AError):
    """A numeric invariant broke at runtime (NaN/inf loss)."""
