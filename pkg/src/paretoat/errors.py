"""Exception types shared across the toolkit.

The CLI maps UsageError/InputError to exit code 1 and NumericalError (plus
any other runtime failure) to exit code 2.
"""


class InputError(ValueError):
    """Malformed or out-of-contract input (shapes, ranges, file contents)."""


class UsageError(InputError):
    """API or CLI misuse: missing required argument, unknown flag, bad combination."""


class IngestionError(InputError):
    """Dataset file missing, truncated, or failing its checksum."""


class NumericalError(RuntimeError):
    """Non-finite values or a solver that failed to converge."""
