"""Shared exception types.

Each maps to a process exit code in the CLI: ConfigError -> 2,
DataError -> 3, DivergenceError -> 4.
"""


class PnglabError(Exception):
    """Base class for package errors."""


class ConfigError(PnglabError):
    """Invalid configuration value, flag combination, or preset."""


class DataError(PnglabError):
    """Malformed input file, hash mismatch, or inconsistent corpus."""


class DivergenceError(PnglabError):
    """Training produced a non-finite value."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite value at step {step}")
