"""Exception hierarchy shared across the package."""


class HptError(Exception):
    """Base class for all package errors."""


class DimensionError(HptError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(HptError, ValueError):
    """A configuration value is invalid."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class UsageError(HptError, RuntimeError):
    """An API was called in a state that does not allow it."""


class RoutingError(HptError, KeyError):
    """Input does not match the embodiment it was routed to, or the embodiment is unknown."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class RegistryError(RoutingError):
    """Embodiment registry misuse (unknown or duplicate id)."""


class TrainingError(HptError, RuntimeError):
    """Optimizer or training-loop contract violated."""


class NonFiniteLossError(TrainingError):
    """A training loss became NaN or infinite."""

    def __init__(self, message: str, step: int, snapshot_path: str | None = None):
        super().__init__(message)
        self.step = step
        self.snapshot_path = snapshot_path


class FormatError(HptError, IOError):
    """Base class for on-disk format problems."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    """Header-declared shapes disagree with the payload or the manifest."""
