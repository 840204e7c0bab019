"""EMG-conditioned speech enhancement: synthesis, training, and evaluation."""

__version__ = "0.1.0"

from .errors import (
    EmgseError,
    ShapeError,
    ConfigError,
    InputError,
    DomainError,
    ContractError,
    NumericError,
)

__all__ = [
    "EmgseError", "ShapeError", "ConfigError", "InputError",
    "DomainError", "ContractError", "NumericError", "__version__",
]
