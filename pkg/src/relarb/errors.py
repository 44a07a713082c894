"""Exception types shared across the package."""


class RelarbError(Exception):
    """Base class for package errors."""


class CflError(RelarbError):
    """Requested time-step count violates the explicit-scheme stability bound."""

    def __init__(self, requested: int, required: int, dtau_max: float):
        self.requested = requested
        self.required = required
        self.dtau_max = dtau_max
        super().__init__(
            f"time-step count {requested} violates the CFL bound; "
            f"need at least {required} steps (dtau <= {dtau_max:.3e})"
        )


class SchemeError(RelarbError):
    """The monotone stencil cannot be built for the given coefficients."""


class NonFiniteError(RelarbError):
    """A solver or simulator produced a non-finite value."""

    def __init__(self, message, step=None, node=None):
        self.step = step
        self.node = node
        super().__init__(message)


class ConstraintViolationError(RelarbError):
    """A simulated model left its declared uncertainty set."""

    def __init__(self, message, time=None, state=None):
        self.time = time
        self.state = state
        super().__init__(message)


class ConfigError(RelarbError):
    """A run configuration failed validation; message carries the key path."""
