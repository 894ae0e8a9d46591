"""Exception hierarchy shared by every module.

The CLI maps any ``HorizonError`` to exit code 1.
"""


class HorizonError(Exception):
    """Base class for domain errors."""


class FormatError(HorizonError):
    """A file does not match its declared format or version."""


class InvalidConfig(HorizonError):
    pass


class PrefixTooLarge(HorizonError):
    pass


class EmptyWindow(HorizonError):
    pass


class EmptyRubric(HorizonError):
    pass


class IndexOutOfRange(HorizonError, IndexError):
    pass


class EmptyLossMask(HorizonError):
    pass


class EmptyBatch(HorizonError):
    pass


class EmptyEvaluation(HorizonError):
    pass


class NonIncreasingTimeouts(HorizonError):
    pass


class LengthMismatch(HorizonError):
    pass


class NonPositiveEntries(HorizonError):
    pass


class InvalidSpec(HorizonError):
    pass


class Blacklisted(HorizonError):
    """A resource named in the blacklist was requested."""
