"""Shared exception types."""


class ConfigurationError(Exception):
    """Raised when a config value, model wiring, or file setup is inconsistent."""


class InputError(ValueError):
    """Raised when runtime input data violates a precondition (shape, range, alignment)."""
