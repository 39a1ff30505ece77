"""Exception types raised across the package."""


class PcfError(Exception):
    """Base class for all pcfgaze errors."""


class InvalidInputError(PcfError, ValueError):
    """Input violates a documented precondition."""


class DisconnectedManifold(PcfError):
    """The neighbor graph has more than one connected component."""

    def __init__(self, component_sizes):
        self.component_sizes = sorted((int(s) for s in component_sizes), reverse=True)
        super().__init__(
            f"neighbor graph is disconnected: {len(self.component_sizes)} components "
            f"with sizes {self.component_sizes[:10]}"
        )


class RankDeficientError(PcfError):
    """Fewer than three positive eigenvalues in the centered Gram matrix."""

    def __init__(self, usable_rank):
        self.usable_rank = int(usable_rank)
        super().__init__(f"only {self.usable_rank} positive eigenvalue(s); need 3")


class DegeneratePointError(PcfError, ValueError):
    """A point coincides with the sphere center."""


class OutOfRangeError(PcfError, ValueError):
    """Angles fall outside the invertible range of a spherical fit."""


class ContractViolation(PcfError, RuntimeError):
    """An internal calling contract was broken (e.g. a stale forward cache)."""


class FormatError(PcfError, ValueError):
    """A file does not follow its declared binary or text layout."""


class DataError(PcfError, ValueError):
    """A file parsed correctly but carries invalid values."""


class NumericalError(PcfError, ArithmeticError):
    """A computation produced non-finite values."""
