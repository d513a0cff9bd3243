"""Exception hierarchy shared across the package."""


class P2PGridError(Exception):
    """Base class for all errors raised by p2pgrid."""


class NetworkFileError(P2PGridError):
    """Malformed network or roster file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class TopologyError(P2PGridError):
    """The line graph is not a tree rooted at the slack node."""


class LimitError(P2PGridError):
    """An operating band is empty or inverted."""


class SingularBranchError(P2PGridError):
    """A line has zero series impedance."""


class PowerFlowDivergence(P2PGridError):
    """Newton iterations did not reach the mismatch tolerance."""

    def __init__(self, message, mismatch, iterations):
        self.mismatch = mismatch
        self.iterations = iterations
        super().__init__(f"{message} (mismatch={mismatch:.3e} after {iterations} iterations)")


class NumericalError(P2PGridError):
    """Singular or badly conditioned linear system."""

    def __init__(self, message, condition=None):
        self.condition = condition
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)


class DegenerateVoltageError(NumericalError):
    """A nodal voltage magnitude is too small to differentiate through."""


class DomainError(P2PGridError, ValueError):
    """A trading volume lies outside the peer's bounds."""


class AllocationError(P2PGridError):
    """Network cost cannot be allocated (undefined sensitivity on an active limit)."""


class NegotiationDivergence(P2PGridError):
    """Negotiation kept oscillating after the step size was reduced."""

    def __init__(self, message, history):
        self.history = history
        super().__init__(message)


class OptimizationError(P2PGridError):
    """Projected-gradient ascent did not reach the stationarity tolerance."""

    def __init__(self, message, gradient_norms):
        self.gradient_norms = gradient_norms
        super().__init__(f"{message} (last projected-gradient norm {gradient_norms[-1]:.3e})")


class ConfigError(P2PGridError):
    """Invalid scenario configuration."""
