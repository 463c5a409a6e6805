"""Exception hierarchy shared across the package."""


class SolarError(Exception):
    """Base class for all package errors."""


class DegenerateInputError(SolarError, ValueError):
    """Input makes the requested quantity undefined (zero norm, zero variance, ...)."""


class InvertedSignalError(DegenerateInputError):
    """Positive score distribution does not sit above the negative one."""


class ConfigError(SolarError, ValueError):
    """Invalid configuration value."""


class FixtureError(SolarError, ValueError):
    """A fixture directory or tensor file failed validation."""


class NumericalAbort(SolarError, FloatingPointError):
    """Training produced a non-finite loss or parameter."""
