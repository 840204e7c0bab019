"""Exception taxonomy shared across the package.

Each class maps to one CLI exit code (see cli.EXIT_CODES).
"""


class EmgseError(Exception):
    """Base class for all package errors."""


class ShapeError(EmgseError, ValueError):
    """Operand extents are inconsistent with the operation's contract."""


class ConfigError(EmgseError, ValueError):
    """A configuration value is invalid or internally inconsistent."""


class InputError(EmgseError, ValueError):
    """User-supplied data (files, waveforms, manifests) is unusable."""


class DomainError(EmgseError, ValueError):
    """A numeric primitive was fed values outside its domain (e.g. log of 0)."""


class ContractError(EmgseError, ValueError):
    """A call violated an API precondition that is not a shape issue."""


class NumericError(EmgseError, ArithmeticError):
    """Non-finite values appeared where finite math was required (training abort)."""
