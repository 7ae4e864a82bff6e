"""Exception types shared across the package."""


class FedTripError(Exception):
    """Base class for all errors raised by this package."""


class LayoutError(FedTripError, ValueError):
    """Parameter vectors or arrays whose shapes/layouts do not agree."""


class ConfigError(FedTripError, ValueError):
    """Invalid configuration or argument combination."""


class CapacityError(FedTripError, ValueError):
    """Not enough samples to satisfy a partition request."""


class SingularityError(FedTripError, ArithmeticError):
    """A linear system that must be positive definite is not."""


class IdxFormatError(FedTripError, ValueError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
