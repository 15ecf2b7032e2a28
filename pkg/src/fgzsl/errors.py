"""Exception types shared across the library.

Validation-style failures (bad shapes, bad files, bad arguments) and
numeric failures (non-finite values during optimization) are kept in
separate branches so callers, including the CLI, can map them to
distinct exit codes.
"""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class DomainError(ValueError):
    """An argument is outside the operation's domain."""


class FormatError(ValueError):
    """An on-disk artifact does not match its declared format."""


class VersionError(FormatError):
    """A container's version tag is not supported by this build."""


class OovError(LookupError):
    """Every token of a phrase is missing from the word-vector table."""


class StateError(RuntimeError):
    """An operation was invoked before its prerequisites completed."""


class FreezeError(RuntimeError):
    """A mutation was attempted on frozen parameters."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""
