"""Exception hierarchy.

``DataError`` subclasses are problems with inputs (bad query, bad files,
not enough data) and map to CLI exit code 3. Everything else is a bug.
"""


class SpotError(Exception):
    pass


class DataError(SpotError):
    pass


class EmptyString(DataError):
    pass


class UnsupportedCharacter(DataError):
    def __init__(self, char, position):
        super().__init__(f"unsupported character {char!r} at position {position}")
        self.char = char
        self.position = position


class WrongLength(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class ImageTooSmall(DataError):
    pass


class InsufficientData(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class KindMismatch(DataError):
    pass


class InsufficientPairs(DataError):
    pass


class NumericalFailure(SpotError):
    pass


class OutOfBounds(DataError):
    pass


class UnknownBigram(DataError):
    pass


class QueryTooShort(DataError):
    pass


class NoKnownBigrams(DataError):
    pass


class MissingPageMap(DataError):
    pass


class EmptyRelevantSet(DataError):
    pass


class NoLineAnnotations(DataError):
    pass


class VocabularyEmpty(DataError):
    pass


class PageOverflow(DataError):
    pass


class MissingData(DataError):
    pass


class FormatError(DataError):
    """Bad magic, unsupported version or bundle/index mismatch."""
