"""Exception hierarchy shared by every molgrad module."""


class MolgradError(Exception):
    """Base class for all errors raised by molgrad."""


class ShapeError(MolgradError, ValueError):
    """Array or matrix dimensions do not agree."""


class DomainError(MolgradError, ValueError):
    """Input outside the domain on which an operation is defined."""


class UnsupportedVariantError(MolgradError, ValueError):
    """Operation called on a network variant it does not handle."""


class CapExceededError(MolgradError, ValueError):
    """A dense computation would exceed the configured size cap."""


class ValidationError(MolgradError, ValueError):
    """Parameters fail a validation gate (e.g. step-size conditions)."""


class NumericalError(MolgradError, ArithmeticError):
    """A computation produced non-finite values.

    ``payload`` carries whatever context the caller attached (e.g. the
    offending minibatch) so it can be dumped for inspection.
    """

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


class FormatError(MolgradError, ValueError):
    """Malformed or truncated file content."""
