class EmmilError(Exception):
    """Base class for user-facing errors (CLI exit code 1)."""


class ConfigError(EmmilError):
    pass


class DataError(EmmilError):
    pass


class NumericsError(EmmilError):
    pass


class InvariantError(RuntimeError):
    """An internal invariant was violated (CLI exit code 2)."""
