"""Exception hierarchy; the CLI maps each family to an exit code."""


class FeatAugError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FeatAugError, ValueError):
    exit_code = 2


class DataError(FeatAugError, ValueError):
    exit_code = 3


class NumericalError(FeatAugError, FloatingPointError):
    exit_code = 4
