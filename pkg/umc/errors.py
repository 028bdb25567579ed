r"""
Exceptions raised across the package. Everything derives from :class:`UmcError`, and most
classes also derive from a builtin exception so callers can catch them generically.
"""


class UmcError(Exception):
    r"""Base class of every exception raised by :mod:`umc`."""


class ShapeError(UmcError, ValueError):
    r"""Tensor dimensions disagree with what an operation requires."""


class ParamError(UmcError, KeyError):
    r"""A named parameter is missing, unexpected, mis-shaped or non-finite."""

    def __str__(self):
        # KeyError quotes its argument, keep messages readable.
        return str(self.args[0]) if self.args else ""


class ConfigError(UmcError, ValueError):
    r"""A configuration is inconsistent or infeasible."""


class StaleStateError(UmcError, RuntimeError):
    r"""An agent state is advanced by more than one timestep at once."""


class SkipSignal(UmcError):
    r"""
    Raised by cross selection when the self-selected candidate set is empty. Callers treat it
    as "close the cross-select stage for this collaborator" rather than as a failure.
    """


class EncodeError(UmcError, ValueError):
    r"""A sparse packet violates its invariants and cannot be encoded."""


class EmptyLedgerError(UmcError, ValueError):
    r"""Communication volume requested from a ledger with nothing transmitted."""


class ParseError(UmcError, ValueError):
    r"""
    A line of a JSONL input file could not be parsed.

    Parameters
    ----------
    path: str
        Path of the offending file.
    line_number: int
        One-based line number of the offending record.
    message: str
        What went wrong.
    """

    def __init__(self, path: str, line_number: int, message: str):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


class DecodeError(UmcError, ValueError):
    r"""Base class for everything that can go wrong while decoding a wire packet."""


class BadMagic(DecodeError):
    pass


class UnsupportedVersion(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class TrailingBytes(DecodeError):
    pass


class InvalidHeader(DecodeError):
    pass


class CellOutOfRange(DecodeError):
    pass


class UnsortedCells(DecodeError):
    pass


class DuplicateCell(DecodeError):
    pass


class NonFiniteValue(DecodeError):
    pass
