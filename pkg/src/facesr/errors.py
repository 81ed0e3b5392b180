"""Shared exception types."""


class DataError(ValueError):
    """Training or input data does not satisfy an operation's preconditions."""


class DegenerateInputError(ValueError):
    """Geometrically degenerate input (e.g. coincident eye positions)."""
