"""Exception hierarchy shared by every stage of the pipeline."""


class FlowMotionError(Exception):
    """Base class for all errors raised by this package."""


class NpyFormatError(FlowMotionError, ValueError):
    """Malformed NPY magic or header."""


class UnsupportedDtypeError(NpyFormatError):
    pass


class NpyShapeError(NpyFormatError):
    pass


class NpyLengthError(NpyFormatError):
    pass


class ShapeError(FlowMotionError, ValueError):
    pass


class DegenerateBoxError(FlowMotionError, ValueError):
    """A box rounds to an empty pixel window."""


class TemporalOrderError(FlowMotionError, ValueError):
    pass


class InsufficientTrackError(FlowMotionError, ValueError):
    """No partner observation is available to compute a velocity."""


class ExtrapolationError(FlowMotionError, ValueError):
    pass


class NoPredecessorError(FlowMotionError, ValueError):
    pass


class UndefinedMetricError(FlowMotionError, ZeroDivisionError):
    """A precision/recall/F1 denominator is zero."""


class NumericError(FlowMotionError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class ConfigurationError(FlowMotionError, ValueError):
    pass


class CheckpointError(FlowMotionError, ValueError):
    pass
