"""Exception types shared across the package."""


class PVCError(Exception):
    """Base class for all package errors."""


class EmptyInputError(PVCError, ValueError):
    """Input has no usable content (zero-length audio, empty file, empty list)."""


class ContractViolation(PVCError, ValueError):
    """An argument breaks an operation's precondition (wrong kind, shape, range)."""


class ParseError(PVCError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(PVCError, ValueError):
    """Parsed data is well-formed but semantically invalid (overlaps, out of range)."""


class InsufficientDataError(PVCError, ValueError):
    pass


class MissingInputError(PVCError, FileNotFoundError):
    """A required artifact or side input (e.g. an alignment) is absent."""


class TrainingDivergedError(PVCError, RuntimeError):
    pass


class FormatError(PVCError, ValueError):
    """A binary container has a bad magic, version or truncated payload."""
