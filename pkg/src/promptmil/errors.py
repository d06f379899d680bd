"""Exception hierarchy.

Every error raised on bad data derives from :class:`DataError`, which the CLI
maps to exit code 2.
"""


class PromptMILError(Exception):
    pass


class DataError(PromptMILError):
    """Invalid or inconsistent input data."""


class MalformedHeader(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class IoFailure(DataError):
    pass


class TooFewBags(DataError):
    pass


class ZeroNormInstance(DataError):
    pass


class ZeroNormPrompt(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


class KOutOfRange(DataError):
    pass


class EmptyGroup(DataError):
    pass


class NonFiniteActivation(DataError):
    pass


class NonFiniteGradient(DataError):
    pass


class InvalidProbability(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class UnknownSchedule(DataError):
    pass


class EmptySplit(DataError):
    pass


class SingleClassOnly(DataError):
    pass


class InsufficientTissue(DataError):
    pass


class InvalidConfig(DataError):
    pass


class ParseError(DataError):
    pass
