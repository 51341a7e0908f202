"""Exception types raised across the package."""


class SpecTreeError(Exception):
    """Base class for all package errors."""


class EmptyInput(SpecTreeError, ValueError):
    pass


class RootMismatch(SpecTreeError, ValueError):
    pass


class UnknownNode(SpecTreeError, KeyError):
    pass


class MissingOutput(SpecTreeError, KeyError):
    pass


class InvalidTree(SpecTreeError, ValueError):
    pass


class TreeTooLarge(SpecTreeError, ValueError):
    pass


class TreeTooDeep(SpecTreeError, ValueError):
    pass


class ShapeMismatch(SpecTreeError, ValueError):
    pass


class PromptTooLong(SpecTreeError, ValueError):
    pass


class CacheGap(SpecTreeError, ValueError):
    pass


class ChainNotLinked(SpecTreeError, ValueError):
    pass


class EmptyContext(SpecTreeError, ValueError):
    pass


class IncompleteProfile(SpecTreeError, ValueError):
    pass


class BadMagic(SpecTreeError, ValueError):
    pass


class CrcMismatch(SpecTreeError, ValueError):
    pass
