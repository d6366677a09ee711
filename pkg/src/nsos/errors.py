"""Exception types shared across the package."""


class NsosError(Exception):
    """Base class for all errors raised by this package."""


class Unstable(NsosError):
    """Some queue has utilization at or above one."""

    def __init__(self, message, nodes=()):
        super().__init__(message)
        self.nodes = tuple(nodes)


class SingularRouting(NsosError):
    """The flow-balance equations have no unique nonnegative solution."""


class SingularScvSystem(NsosError):
    """The linear system for the arrival SCVs is singular."""


class OutOfDomain(NsosError, ValueError):
    pass


class ZeroLoadInfeasible(NsosError):
    """The SLO is below the response time of an empty system."""


class TooLarge(NsosError):
    """Exhaustive enumeration would exceed the configured check budget."""

    def __init__(self, message, estimated_checks):
        super().__init__(message)
        self.estimated_checks = estimated_checks


class IncompatibleFamily(NsosError, ValueError):
    pass


class ConfigInvalid(NsosError, ValueError):
    pass


class InsufficientHistory(NsosError):
    pass
