"""Exception hierarchy shared by every module."""


class HistoformerError(Exception):
    """Base class for all package errors."""


class ConfigError(HistoformerError, ValueError):
    """Invalid configuration, hyperparameter or divisibility constraint."""


class DimensionError(HistoformerError, ValueError):
    """Operand shapes do not conform."""


class PermutationError(HistoformerError, IndexError):
    """Index out of range, or an index slice that is not a permutation."""


class NumericError(HistoformerError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class StateError(HistoformerError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class ParseError(HistoformerError, ValueError):
    """Malformed file content.

    ``offset`` is the byte offset (PPM) or ``line`` the 1-based line number
    (config files) where parsing failed, whichever applies.
    """

    def __init__(self, message, offset=None, line=None):
        where = []
        if offset is not None:
            where.append(f"byte {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.line = line
