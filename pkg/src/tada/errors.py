"""Exception hierarchy shared across the package.

Validation errors map to CLI exit code 2, numerical aborts to exit code 3.
"""


class TadaError(Exception):
    """Base class for all package errors."""


class ShapeError(TadaError):
    """A primitive received non-conforming extents.

    The message always names the primitive and the offending shapes.
    """

    def __init__(self, op: str, detail: str):
        self.op = op
        self.detail = detail
        super().__init__(f"{op}: {detail}")


class ValidationError(TadaError):
    """Bad input, violated precondition, or malformed configuration."""


class InfeasibleError(ValidationError):
    """A sequence problem has no feasible solution (e.g. L > T)."""


class NumericalAbort(TadaError):
    """A computation produced non-finite values and cannot continue."""
