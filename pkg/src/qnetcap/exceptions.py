"""Exception types shared across the toolkit."""


class InputError(ValueError):
    """Malformed input: bad layout, violated precondition, out-of-range parameter."""


class LayoutError(InputError):
    """Subsystem labels or dimensions do not line up."""


class DimensionGuardError(InputError):
    """A dense representation would exceed the configured dimension guard."""


class OracleDisagreement(RuntimeError):
    """The grid oracle and the gradient minimizer disagree beyond tolerance."""


class ExtractionError(RuntimeError):
    """A constructed partial isometry failed its post-hoc fidelity bound.

    The ``diagnostics`` attribute carries the per-leg numbers that were checked.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BroadcastStrippingError(InputError):
    """Encoding stripping was requested for a receiver structure it does not cover."""
