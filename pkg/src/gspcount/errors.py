"""Exception hierarchy shared by all gspcount modules."""


class GSPCountError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(GSPCountError, ValueError):
    """Shapes are incompatible with an operation."""


class NumericError(GSPCountError, ArithmeticError):
    """A value or gradient became non-finite."""


class ContractError(GSPCountError, ValueError):
    """An operation was called outside its contract."""


class ConfigError(GSPCountError, ValueError):
    """A configuration is inconsistent or malformed."""


class FormatError(GSPCountError, ValueError):
    """A serialized file does not match the expected format."""


class GeometryError(GSPCountError, ValueError):
    """A rectangle or box has invalid geometry."""


class CapacityError(GSPCountError, RuntimeError):
    """Objects could not be placed within the rejection budget."""


class AnnotationError(GSPCountError, ValueError):
    """Required annotations are missing."""


class LoadError(GSPCountError, OSError):
    """A dataset on disk is missing files or contains bad records."""


class TrainingError(GSPCountError, RuntimeError):
    """Training diverged or had nothing to train on."""
