"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative fit exhausts its iteration budget.

    The best parameters seen so far are kept on ``best`` so callers can
    still inspect (or accept) a partial result.
    """

    def __init__(self, message, best=None, objective=None):
        super().__init__(message)
        self.best = best
        self.objective = objective


class CapacityError(RuntimeError):
    """Not enough zero-probability routing slots to reach alignment."""

    def __init__(self, message, expert=None):
        super().__init__(message)
        self.expert = expert


class PlanError(ValueError):
    """Malformed pipeline plan (bad assignment or a dependency cycle)."""


class SegmentationError(ValueError):
    """Tokens and detokenized text could not be aligned."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
