"""Exception hierarchy shared by every layer of the editing engine.

The CLI maps these onto exit codes: numeric failures exit 1, missing or
corrupt input exits 2, configuration problems exit 3.
"""


class EditError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ParameterError(EditError, ValueError):
    exit_code = 3


class ConfigError(EditError, ValueError):
    exit_code = 3


class ShapeError(EditError, ValueError):
    exit_code = 3


class VocabularyError(EditError, KeyError):
    exit_code = 3


class UnsupportedError(EditError):
    """The selected backbone lacks a capability the operation needs."""

    exit_code = 3


class InjectionError(EditError):
    """An attention directive does not fit the receiving backbone."""

    exit_code = 3


class NumericError(EditError, ArithmeticError):
    """A loss or prediction became non-finite.

    ``step`` carries the 1-based denoising step when known.
    """

    exit_code = 1

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingError(NumericError):
    pass


class CacheError(EditError):
    """Base for cache container failures. ``code`` identifies the class."""

    exit_code = 2
    code = "cache"


class CacheMagicError(CacheError):
    code = "bad-magic"


class CacheVersionError(CacheError):
    """Container written by an incompatible format version; needs migration."""

    code = "bad-version"


class CacheChecksumError(CacheError):
    code = "bad-checksum"


class CacheTruncatedError(CacheChecksumError):
    code = "truncated"
