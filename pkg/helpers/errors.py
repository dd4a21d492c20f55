"""
Exception hierarchy for fomemo
"""


class FomemoError(Exception):
    """Base class for every error raised by this package"""


class FactorizationError(FomemoError):
    """Cholesky factorization failed even after jitter escalation"""


class DomainError(FomemoError):
    """A point lies outside the region an estimator is defined on"""


class DimensionError(FomemoError):
    """A feature or objective dimension exceeds what is supported"""


class DimensionMismatch(DimensionError):
    """Two point sets that must share a dimension do not"""


class ShapeError(FomemoError):
    """Tensor shapes handed to the model do not line up"""


class DegenerateSupport(FomemoError):
    """Riemann bin boundaries collapsed (near-constant prior samples)"""


class EmptyTrajectory(FomemoError):
    """An operation needs at least one evaluated point"""


class BoundsError(FomemoError):
    """A decision vector lies outside the problem bounds"""


class NoAnalyticFront(FomemoError):
    """The problem has no closed-form Pareto front"""


class ProtocolError(FomemoError):
    """An external problem child sent a malformed line"""


class ChildExitError(FomemoError):
    """An external problem child exited while a reply was pending"""


class EvaluationTimeout(FomemoError, TimeoutError):
    """An external problem child did not answer in time"""


class ProblemError(FomemoError):
    """Unknown or misconfigured benchmark problem"""


class ProblemEvaluationError(FomemoError):
    """Evaluating a candidate failed and the run was aborted"""


class CheckpointError(FomemoError):
    """A checkpoint could not be used"""


class CheckpointIOError(CheckpointError):
    """A checkpoint could not be read or written"""


class ConfigError(FomemoError):
    """A configuration file failed to parse or validate"""


class MissingReference(FomemoError):
    """A metric needs a reference front that is not available"""


class NonFiniteLoss(FomemoError):
    """A training step produced a NaN or infinite loss"""
