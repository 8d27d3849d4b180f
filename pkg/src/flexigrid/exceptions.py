"""Exception hierarchy shared by all flexigrid modules."""


class FlexigridError(Exception):
    """Base class for every error raised by this package."""


class ScenarioError(FlexigridError, ValueError):
    """Invalid link or traffic parameters."""


class NonDivisible(ScenarioError):
    pass


class NonPositiveRate(ScenarioError):
    pass


class N2TooSmall(ScenarioError):
    pass


class CapacityExceeded(FlexigridError):
    """A state space is larger than the configured limit."""

    def __init__(self, message, count=None, limit=None):
        super().__init__(message)
        self.count = count
        self.limit = limit


class NotInvertible(FlexigridError, ValueError):
    pass


class InvariantViolation(FlexigridError):
    """An internal consistency check failed; this is a bug, not bad input."""


class DimensionMismatch(FlexigridError, ValueError):
    pass


class StepTooLarge(FlexigridError, ValueError):
    pass


class NonFiniteValue(FlexigridError, FloatingPointError):
    """An iterate became non-finite or left the range of the initial function."""


class SingularSystem(FlexigridError):
    pass


class ToleranceNotMet(FlexigridError):
    pass


class EnclosureViolation(InvariantViolation):
    """The bound chain lower <= exact <= upper was broken.

    Attributes
    ----------
    values : dict
        The compared quantities, keyed by name.
    """

    def __init__(self, message, values):
        super().__init__(message)
        self.values = dict(values)
