"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every error raised on purpose
by library code derives from :class:`PaseError`.
"""


class PaseError(Exception):
    """Base class for all package errors."""


class DataError(PaseError, ValueError):
    """Bad input data: malformed files, inconsistent shapes, invalid corpora."""


class DivergenceError(PaseError, ArithmeticError):
    """A training step produced a non-finite loss."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class FeatureFileError(DataError):
    """Feature track file could not be decoded.

    ``code`` is one of ``bad_magic``, ``bad_version``, ``truncated_header``,
    ``truncated_payload``, ``inconsistent_header``.
    """

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code
