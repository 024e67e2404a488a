"""Exception types raised across the package."""


class InvalidParameterError(ValueError):
    """An argument is malformed, non-finite, or outside its allowed range."""


class EmptyInitializationError(ValueError):
    """No points survived downsampling and frustum filtering."""


class RenderDiagnosticsError(FloatingPointError):
    """A Gaussian attribute entering the renderer is not finite."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class FieldStateError(RuntimeError):
    """Backward pass requested without a recorded forward pass."""


class NonFiniteLossError(FloatingPointError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float, iteration: int | None = None):
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"loss term '{term}' is not finite ({value}){where}")
        self.term = term
        self.value = value
        self.iteration = iteration


class LoadError(ValueError):
    """A dataset manifest or one of its records failed validation."""

    def __init__(self, message: str, record: int | None = None):
        prefix = f"frame record {record}: " if record is not None else ""
        super().__init__(prefix + message)
        self.record = record


class CheckpointError(ValueError):
    """A checkpoint container is malformed or has an unsupported version."""
