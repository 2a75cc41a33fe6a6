"""Exception types shared across modules."""


class ValidationError(ValueError):
    """Invalid configuration or input; maps to CLI exit code 2."""


class EffectiveRankDeficient(ArithmeticError):
    """Local weighted design is singular at the requested bandwidth."""


class NoFeasibleBandwidth(ArithmeticError):
    """Every candidate bandwidth was rank deficient at a query point."""


class TooManyFailures(RuntimeError):
    """More than the tolerated fraction of grid nodes failed in one step."""


class AlAborted(RuntimeError):
    """An active-learning iteration failed; ``trace`` holds the completed part."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
