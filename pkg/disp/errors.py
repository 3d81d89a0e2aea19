#!/usr/bin/env python3
"""
Exception types raised across the defense pipeline.

Every error subclasses a builtin (ValueError or ArithmeticError) so callers
that only know the builtins can still catch them. The CLI maps the four
families to exit codes.
"""


class DispError(Exception):
    """Base class for all errors raised by disp."""


class DataError(DispError, ValueError):
    """
    Malformed or inconsistent input data.

    Args:
        message: Description of the problem
        line: 1-based line number in a text file, if known
        offset: Byte offset in a binary file, if known
    """

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        self.line = line
        self.offset = offset
        if line is not None:
            message = f"line {line}: {message}"
        elif offset is not None:
            message = f"byte offset {offset}: {message}"
        super().__init__(message)


class CorruptFileError(DataError):
    """Binary file whose magic, version or length does not check out."""


class VersionMismatchError(CorruptFileError):
    """Binary file written by an incompatible format version."""


class VocabularyMismatch(DataError):
    """Two artifacts that must share an embedding corpus do not."""


class AttackError(DispError, ValueError):
    """An attack cannot be applied to the given input."""


class TokenTooShort(AttackError):
    pass


class NoDistinctPair(AttackError):
    pass


class EmptyVocabulary(AttackError):
    pass


class TokenNotInCorpus(AttackError):
    pass


class NotEnoughAttackableTokens(AttackError):
    pass


class ModelError(DispError, ValueError):
    """Invalid input to a model or index."""


class SequenceTooLong(ModelError):
    pass


class IdOutOfRange(ModelError):
    pass


class NoTrainableWindows(ModelError):
    pass


class EmptyCorpus(ModelError):
    pass


class EmptyIndex(ModelError):
    pass


class NumericError(DispError, ArithmeticError):
    """A loss or gradient stopped being finite."""


class NonFiniteLoss(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass
