"""Exception hierarchy shared by every module in the package."""


class RebalanceError(Exception):
    """Base class for all package errors."""


class InvalidInput(RebalanceError, ValueError):
    pass


class NonCanonicalEntry(InvalidInput):
    """A routing-table entry points a key at its own hash destination."""


class ZeroTotalLoad(RebalanceError, ZeroDivisionError):
    pass


class UnknownKey(RebalanceError, KeyError):
    pass


class OutOfRange(InvalidInput):
    pass


class CountMismatch(RebalanceError):
    pass


class NonTermination(RebalanceError, RuntimeError):
    """LLFD exceeded its Adjust-invocation budget."""


class CapacityInfeasible(RebalanceError):
    """Even a fully cleaned routing table cannot meet the size limit.

    ``outcome`` carries the fallback result (the MinTable plan) so callers that
    must make progress anyway can still apply it.
    """

    def __init__(self, message, outcome=None):
        super().__init__(message)
        self.outcome = outcome


class Unreachable(RebalanceError, RuntimeError):
    """The fluctuation target could not be met within the swap budget."""


class ConfigError(RebalanceError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
