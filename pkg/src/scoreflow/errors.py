"""Exception hierarchy shared by all scoreflow modules."""


class ScoreflowError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(ScoreflowError, ValueError):
    pass


class NotPositiveDefinite(ScoreflowError, ValueError):
    pass


class NoConvergence(ScoreflowError, RuntimeError):
    pass


class Overflow(ScoreflowError, FloatingPointError):
    pass


class EmptyBatch(ScoreflowError, ValueError):
    pass


class EmptySample(ScoreflowError, ValueError):
    pass


class EmptyInput(ScoreflowError, ValueError):
    pass


class SingularSystem(ScoreflowError, ValueError):
    pass


class Divergence(ScoreflowError, FloatingPointError):
    """Training loss became non-finite (usually the step size is too large)."""


class NonFinite(ScoreflowError, FloatingPointError):
    """An integrated state left the finite range."""


class NotSquare(ScoreflowError, ValueError):
    pass


class NonConvergence(ScoreflowError, RuntimeError):
    """Sinkhorn marginals still violated after the iteration budget."""


class TooFewSamples(ScoreflowError, ValueError):
    pass


class TooFewRows(ScoreflowError, ValueError):
    pass


class DimensionTooSmall(ScoreflowError, ValueError):
    pass


class BadK(ScoreflowError, ValueError):
    pass


class ArmMissing(ScoreflowError, ValueError):
    pass


class DegenerateMoments(ScoreflowError, ValueError):
    pass


class SingularDesign(ScoreflowError, ValueError):
    pass


class BadColumns(ScoreflowError, ValueError):
    pass


class TooFewComplete(ScoreflowError, ValueError):
    pass


class TooFewImputations(ScoreflowError, ValueError):
    pass


class NoSolutionInBracket(ScoreflowError, ValueError):
    pass


class OutOfUnitInterval(ScoreflowError, ValueError):
    pass


class ConfigInvalid(ScoreflowError, ValueError):
    pass


class ExperimentFailed(ScoreflowError, RuntimeError):
    pass
