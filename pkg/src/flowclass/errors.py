"""Shared error types mapped to CLI exit codes."""


class InputError(Exception):
    """Bad or missing input data (exit code 2)."""


class NumericError(RuntimeError):
    """Non-finite value encountered during numeric evaluation (exit code 3)."""
