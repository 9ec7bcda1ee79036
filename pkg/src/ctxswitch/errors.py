"""Exception hierarchy.

Every error carries a class name that the CLI prints verbatim, so callers can
match on ``type(err).__name__`` as well as on the class itself.
"""


class CtxSwitchError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class DataError(CtxSwitchError):
    exit_code = 3


class InfeasibleError(CtxSwitchError):
    exit_code = 4


# dataset
class MissingFile(DataError):
    pass


class SchemaViolation(DataError):
    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class DuplicateClass(DataError):
    pass


class EmptySplit(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class UnknownClassIndex(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class EmptyClass(DataError):
    pass


class InfeasibleGeometry(InfeasibleError):
    pass


# similarity
class ZeroVector(DataError):
    pass


class ComboTooSmall(DataError):
    pass


class DuplicateClassInCombo(DataError):
    pass


class EmptyRow(DataError):
    pass


# heads
class NoNegativesAvailable(DataError):
    pass


class NotADistribution(DataError):
    pass


class HeadFormatError(DataError):
    pass


# predictor
class BadM(DataError):
    pass


class EmptyTrainingSet(DataError):
    pass


class PredictorError(DataError):
    pass


# selection
class RateOutOfRange(DataError):
    pass


class CoverageInfeasible(InfeasibleError):
    pass


class ExhaustedCandidates(InfeasibleError):
    pass


class EmptyTrace(DataError):
    pass


# switching
class NoLocalHeadAvailable(InfeasibleError):
    pass


class NewClassUncovered(NoLocalHeadAvailable):
    pass


# simulator
class InsufficientSamples(DataError):
    pass


class LogDisabled(CtxSwitchError):
    pass


class FrameError(CtxSwitchError):
    """Wraps an error raised while processing one frame of a simulation."""

    def __init__(self, frame_index, cause):
        self.frame_index = frame_index
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)
        super().__init__(f"frame {frame_index}: {type(cause).__name__}: {cause}")
