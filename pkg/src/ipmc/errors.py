"""Shared exception types.

Every error raised by the library is a subclass of IpmcError so callers
(and the CLI) can distinguish library failures from programming bugs.
"""


class IpmcError(Exception):
    """Base class for all library errors."""


class ShapeError(IpmcError):
    """Operand shapes are inconsistent with the operation."""


class DomainError(IpmcError):
    """Input value lies outside the mathematical domain of the operation."""


class ConfigError(IpmcError):
    """Invalid configuration value or combination."""


class SamplingError(IpmcError):
    """A sampling request cannot be satisfied (e.g. too few candidates)."""


class FormatError(IpmcError):
    """A serialized artifact is malformed (bad magic, truncation, version)."""


class DivergenceError(IpmcError):
    """An iterative procedure left its numerically sane regime."""
