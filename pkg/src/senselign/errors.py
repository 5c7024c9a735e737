"""Exception types shared across the package.

Plain ``ValueError`` is used for generic invalid arguments; the classes here
exist where callers need to distinguish a failure mode (skip vs abort).
"""


class DegenerateVectorError(ValueError):
    """A vector whose norm is below the degeneracy threshold was about to be
    normalized.  ``index`` identifies the offending row when known."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EmptySequenceError(ValueError):
    """An operation that needs at least one non-pad token got none."""


class InvalidTokenError(ValueError):
    """A token id outside the vocabulary range."""


class UndefinedCorrelationError(ValueError):
    """Rank correlation requested on a constant input."""


class PairDiscarded(Exception):
    """An analysis pair failed a validity check and should be skipped and
    counted, not treated as a hard error."""


class ParseError(ValueError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ConfigError(ValueError):
    """Invalid or unknown run-configuration key/value; carries the key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
