"""Exception and warning types shared across the toolkit."""


class ProtoheadError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(ProtoheadError):
    """File does not carry the expected magic/header layout."""


class CorruptFileError(ProtoheadError):
    """File has a valid header but a truncated or inconsistent payload."""


class ValidationError(ProtoheadError):
    """Input violates a documented invariant or precondition."""


class EmptyRegionError(ProtoheadError):
    """A region selects no patch cells / does not intersect the image."""


class ConvergenceError(ProtoheadError):
    """Iterative solver produced non-finite scaling factors."""


class DegenerateBoxError(ProtoheadError):
    """A box with zero extent where a positive-area box is required."""


class NumericalError(ProtoheadError):
    """A forward pass produced non-finite values."""


class ProtoheadWarning(UserWarning):
    """Non-fatal conditions: empty heatmaps, skipped groups, zero vectors."""
