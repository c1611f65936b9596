"""Exception hierarchy for the simulator.

The CLI maps ConfigError to exit code 1 and every other FedSRError to 2.
"""


class FedSRError(Exception):
    """Base class for all simulator errors."""


class InputError(FedSRError, ValueError):
    """A caller passed data that violates an operation's precondition."""


class ShapeMismatchError(InputError):
    """Two parameter sets (or arrays) that must align do not."""


class DataFormatError(InputError):
    """Malformed interaction log. Carries the 1-based line and column."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ''
        if line is not None:
            where = f'line {line}'
            if column is not None:
                where += f', column {column}'
            where += ': '
        super().__init__(f'{where}{message}')


class ConfigError(FedSRError):
    """Invalid or unknown configuration key/value."""


class BundleError(FedSRError):
    """A result bundle is missing, unreadable or incompatible."""
