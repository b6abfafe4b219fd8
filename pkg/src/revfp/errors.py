"""Exception hierarchy shared across the pipeline.

The CLI maps these onto process exit codes, so library code should raise the
most specific class that applies.
"""


class RevfpError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 2


class InvalidInputError(RevfpError, ValueError):
    """Arguments violate an operation's preconditions."""


class DataError(RevfpError):
    """Missing, corrupt or inconsistent on-disk data."""


class UnreliableEstimateError(RevfpError, ValueError):
    """A measurement cannot be made reliably from the given data."""


class NumericalError(RevfpError, FloatingPointError):
    """Non-finite values or divergence during numerical work."""

    exit_code = 3
