"""Exception hierarchy shared by every plumeseg module."""


class PlumeSegError(Exception):
    """Base class for all package errors."""


class FormatError(PlumeSegError):
    """A file does not conform to its container or schema."""


class DataError(PlumeSegError):
    """Values are present but unusable (too many NaNs, duplicates, bad ranges)."""


class IoError(PlumeSegError, OSError):
    """A path could not be read or written."""


class ChannelError(PlumeSegError, KeyError):
    """A required channel is missing from a scene."""

    def __str__(self):
        return Exception.__str__(self)


class BoundsError(PlumeSegError, IndexError):
    """A window or index falls outside the raster."""


class CrsError(PlumeSegError):
    """Two objects that must share a coordinate reference system do not."""


class ShapeError(PlumeSegError, ValueError):
    """Array dimensions are incompatible."""


class NumericsError(PlumeSegError, FloatingPointError):
    """A NaN or Inf appeared in a computation."""


class EmptyError(PlumeSegError, ValueError):
    """An operation received no input where at least one item is required."""


class StatsError(PlumeSegError, ValueError):
    """Normalization statistics are degenerate."""


class NoWithinVariationError(PlumeSegError):
    """The regressor is constant within every panel unit."""


class DofError(PlumeSegError):
    """Too few observations for the requested degrees of freedom."""


class SingularError(PlumeSegError, ArithmeticError):
    """A least-squares design matrix is rank deficient."""


class ConfigError(PlumeSegError, ValueError):
    """A run configuration failed validation."""
