"""Exception hierarchy shared across the solver."""


class CetebError(Exception):
    """Base class for all solver errors."""


class DomainError(CetebError, ValueError):
    """An argument lies outside the domain of an operation."""


class NoBnupError(CetebError):
    """The min-max Hamiltonian has no zero on the captivity boundary."""


class IntegrationDrift(CetebError):
    """The semipermeability residual grew beyond its tolerance."""


class Diverged(CetebError):
    """A retrograde trajectory left the 10*beta safety ball."""


class BarrierOpen(CetebError):
    """No junction was found: the surfaces do not close a barrier."""


class GeometryError(CetebError):
    """The TEB boundary could not be assembled into closed loops."""


class Infeasible(CetebError):
    """The requested margin or performance lies outside the feasible range."""


class NoRoot(CetebError):
    """The junction residual does not change sign over the bracket."""


class ValidityFailed(CetebError):
    """A solution was found but one of the validity conditions fails."""

    def __init__(self, condition: str, message: str = ""):
        self.condition = condition
        super().__init__(message or f"validity condition {condition} violated")


class SafetyViolation(CetebError):
    """The safety controller was queried outside the TEB."""


class SimDiverged(CetebError):
    """A closed-loop simulation produced non-finite states."""
