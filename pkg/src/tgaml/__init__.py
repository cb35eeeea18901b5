"""Temporal graph neural network for money-laundering detection on transaction ledgers."""

__version__ = "0.1.0"


class TgamlError(Exception):
    """Base class for all package errors."""


class ConfigError(TgamlError):
    """Invalid configuration value or missing key."""


class DataError(TgamlError):
    """Malformed or inconsistent input data."""


class ShapeError(TgamlError, ValueError):
    """Incompatible tensor shapes."""


class ContractError(TgamlError):
    """A caller broke an API precondition."""
