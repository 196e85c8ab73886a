"""Exceptions that map onto CLI exit codes."""


class ConfigError(ValueError):
    """Malformed or invalid configuration (exit code 2)."""


class DependencyError(RuntimeError):
    """A required upstream artifact is missing (exit code 3)."""
