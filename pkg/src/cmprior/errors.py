"""Exception hierarchy shared across the package."""


class PriorError(Exception):
    """Base class for all errors raised by cmprior."""


class InvalidParameterError(PriorError, ValueError):
    """A parameter or input value is outside its valid domain."""


class DimensionError(PriorError, ValueError):
    """Array extents do not match what an operation expects."""


class OutOfCoverageError(PriorError, IndexError):
    """A dense-level lookup fell outside the coverage lattice."""


class TrainingError(PriorError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConfigError(PriorError, ValueError):
    """Malformed or unknown configuration entry."""


class FormatError(PriorError, ValueError):
    """Base class for serialized-file errors."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedError(FormatError):
    pass
