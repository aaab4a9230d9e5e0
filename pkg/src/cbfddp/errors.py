"""Exception types shared across the package.

The command line layer maps these onto process exit statuses, so solver code
should raise the most specific type that applies rather than bare ValueError.
"""


class CbfDdpError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CbfDdpError):
    """Invalid configuration value, scenario file, or argument combination."""


class SolverNumericError(CbfDdpError):
    """A solver produced non-finite values or hit an unrecoverable subproblem.

    Attributes:
        iterate: Optional (states, controls) snapshot at failure, for
            diagnostics.
    """

    def __init__(self, message: str, iterate=None):
        super().__init__(message)
        self.iterate = iterate
