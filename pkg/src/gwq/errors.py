"""Exception hierarchy shared by all gwq modules.

The CLI maps these onto its exit-code contract: usage problems exit 1,
data/parse problems exit 2, runtime invariant violations exit 3.
"""


class GwqError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"


class UsageError(GwqError):
    """Bad arguments or configuration supplied by the caller."""

    category = "usage"


class DimensionError(GwqError):
    """Operand shapes are incompatible."""

    category = "dimension"


class DomainError(GwqError):
    """Input value outside the operation's domain (empty tensor, bad fraction)."""

    category = "domain"


class ParseError(GwqError):
    """A file could not be decoded; message names the offending tensor/field."""

    category = "parse"


class AlignmentError(GwqError):
    """Two collections that must be shape-aligned are not."""

    category = "alignment"


class InputError(GwqError):
    """Model input is invalid (token id out of range, sequence too long)."""

    category = "input"


class TrainingError(GwqError):
    """Reference training diverged (non-finite loss)."""

    category = "training"


class EncodingError(GwqError):
    """A value cannot be encoded in the requested format (code out of range)."""

    category = "encoding"


class InvariantError(GwqError):
    """An internal invariant was violated at runtime."""

    category = "invariant"
