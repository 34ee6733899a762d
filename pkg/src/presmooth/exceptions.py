"""Shared exception types."""


class PresmoothError(Exception):
    """Base class for all library errors."""


class SingularCovarianceError(PresmoothError, ValueError):
    """A covariance matrix failed its positive-definiteness check."""

    def __init__(self, name: str, detail: str = ""):
        self.name = name
        msg = f"covariance matrix '{name}' is not positive definite"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class InsufficientSampleError(PresmoothError, ValueError):
    """An operation received fewer particles than it requires."""


class ModelCapabilityError(PresmoothError, TypeError):
    """The model does not expose the structure a filter needs."""


class FilterStepError(PresmoothError, RuntimeError):
    """A filter failed at a specific time step."""

    def __init__(self, step: int, detail: str):
        self.step = step
        super().__init__(f"filter failed at time step {step}: {detail}")


class SpecValidationError(PresmoothError, ValueError):
    """A harness configuration failed validation."""
