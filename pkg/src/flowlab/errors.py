"""Exception hierarchy shared by all flowlab modules.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies.
"""


class FlowLabError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(FlowLabError):
    """Bad parameters, malformed configuration, or violated preconditions.

    CLI exit code 2.
    """


class DivergenceError(FlowLabError):
    """A numeric computation produced NaN/Inf and cannot continue.

    Carries ``step`` (the integration or training step index at which the
    non-finite value appeared) when known.  CLI exit code 3.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class DataFormatError(FlowLabError):
    """A file on disk does not conform to its declared binary/text layout.

    CLI exit code 4.
    """
