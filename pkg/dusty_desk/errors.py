"""Exception hierarchy shared by the library and the command line."""


class DustyError(Exception):
    """Base class for all errors raised by dusty-desk."""

    exit_code = 1


class ConfigError(DustyError, ValueError):
    """Invalid configuration or violated precondition."""

    exit_code = 2


class DimensionError(ConfigError):
    """Tensor or raster shapes do not line up."""


class NumericError(DustyError, ArithmeticError):
    """Non-finite values or a math domain violation."""

    exit_code = 3


class FormatError(DustyError, IOError):
    """A file on disk does not follow the documented layout."""

    exit_code = 4


class IngestionError(FormatError):
    """A point sequence cannot be turned into a raster."""
