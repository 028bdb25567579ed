r"""
Sparse feature packets and their byte layout on the wire.

A packet carries the cells a collaborator selected for one receiver at one resolution level.
All multi-byte fields are little-endian::

    header  = magic b"UMCW" | version: u16 | sender: u16 | receiver: u16 | timestep: i64
              | level: u8 | height: u16 | width: u16 | channels: u16 | count: u32
    entries = (row: u16 | col: u16 | values: f32 * channels) * count

Entries are sorted row-major and unique. Cell values travel as float32, so scattering a
decoded packet reproduces the sender's float64 features up to float32 rounding.
"""
import struct
from dataclasses import dataclass, field
from typing import Iterator, Tuple

import numpy as np

from umc.errors import (
    BadMagic,
    CellOutOfRange,
    DuplicateCell,
    EncodeError,
    InvalidHeader,
    NonFiniteValue,
    TrailingBytes,
    Truncated,
    UnsortedCells,
    UnsupportedVersion,
)


WIRE_MAGIC = b"UMCW"
WIRE_VERSION = 1

_HEADER = struct.Struct("<4sHHHqBHHHI")
HEADER_SIZE = _HEADER.size  # 29 bytes

_U8_MAX, _U16_MAX = 0xFF, 0xFFFF


def _entry_dtype(channels: int) -> np.dtype:
    return np.dtype([("row", "<u2"), ("col", "<u2"), ("values", "<f4", (channels,))])


@dataclass(frozen=True, eq=False)
class SparsePacket:
    r"""
    Selected cells of one feature grid, addressed from ``sender_id`` to ``receiver_id``.

    Parameters
    ----------
    sender_id: int
    receiver_id: int
    timestep: int
    level: int
        Index of the resolution level in the ladder (0 is the coarsest).
    height: int
    width: int
    channels: int
        Dimensions of the dense grid this packet was gathered from.
    rows: np.ndarray
        Row index of every entry, shape (count, ).
    cols: np.ndarray
        Column index of every entry, shape (count, ).
    values: np.ndarray
        Channel vectors of every entry as float32, shape (count, channels).
    """

    sender_id: int
    receiver_id: int
    timestep: int
    level: int
    height: int
    width: int
    channels: int
    rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = None  # type: ignore

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        if self.values is None:
            values = np.zeros((rows.size, self.channels), dtype=np.float32)
        else:
            values = np.asarray(self.values, dtype=np.float32)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", values)

    @property
    def count(self) -> int:
        return int(self.rows.size)

    @property
    def scalar_count(self) -> int:
        r"""Number of feature scalars carried, ``count * channels``."""
        return self.count * self.channels

    @property
    def nbytes(self) -> int:
        return HEADER_SIZE + self.count * (4 + 4 * self.channels)

    def entries(self) -> Iterator[Tuple[int, int, np.ndarray]]:
        for row, col, values in zip(self.rows, self.cols, self.values):
            yield int(row), int(col), values

    def check(self):
        r"""Raise :class:`~umc.errors.EncodeError` if any packet invariant is violated."""
        for name, value, upper in (
            ("sender_id", self.sender_id, _U16_MAX),
            ("receiver_id", self.receiver_id, _U16_MAX),
            ("level", self.level, _U8_MAX),
            ("height", self.height, _U16_MAX),
            ("width", self.width, _U16_MAX),
            ("channels", self.channels, _U16_MAX),
        ):
            if not 0 <= value <= upper:
                raise EncodeError(f"{name}={value} does not fit its wire field.")
        if min(self.height, self.width, self.channels) < 1:
            raise EncodeError("Packet dimensions must be positive.")
        if not -(2 ** 63) <= self.timestep < 2 ** 63:
            raise EncodeError(f"timestep={self.timestep} does not fit in int64.")

        if self.cols.size != self.count or self.values.shape != (self.count, self.channels):
            raise EncodeError("rows, cols and values disagree on the entry count.")
        if self.count > self.height * self.width:
            raise EncodeError("Packet has more entries than grid cells.")
        if self.count > 0:
            if self.rows.min() < 0 or self.rows.max() >= self.height:
                raise EncodeError("Entry row out of range.")
            if self.cols.min() < 0 or self.cols.max() >= self.width:
                raise EncodeError("Entry column out of range.")
            keys = self.rows * self.width + self.cols
            if np.any(np.diff(keys) <= 0):
                raise EncodeError("Entries must be sorted row-major without duplicates.")
            if not np.isfinite(self.values).all():
                raise EncodeError("Entry values must be finite in float32.")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparsePacket):
            return NotImplemented
        return (
            self.header_fields() == other.header_fields()
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def header_fields(self) -> Tuple[int, ...]:
        return (
            self.sender_id,
            self.receiver_id,
            self.timestep,
            self.level,
            self.height,
            self.width,
            self.channels,
        )


def encode(packet: SparsePacket) -> bytes:
    r"""Serialize a packet. The output is a deterministic function of the packet."""
    packet.check()
    header = _HEADER.pack(
        WIRE_MAGIC,
        WIRE_VERSION,
        packet.sender_id,
        packet.receiver_id,
        packet.timestep,
        packet.level,
        packet.height,
        packet.width,
        packet.channels,
        packet.count,
    )
    entries = np.zeros(packet.count, dtype=_entry_dtype(packet.channels))
    entries["row"] = packet.rows
    entries["col"] = packet.cols
    entries["values"] = packet.values
    return header + entries.tobytes()


def decode(data: bytes) -> SparsePacket:
    r"""
    Parse bytes produced by :func:`encode`.

    Raises
    ------
    umc.errors.DecodeError
        One of its subclasses, naming the first violation found. No other exception escapes
        for any input byte string.
    """
    data = bytes(data)
    if len(data) < len(WIRE_MAGIC):
        raise Truncated(f"Packet has {len(data)} bytes, shorter than the magic.")
    if data[: len(WIRE_MAGIC)] != WIRE_MAGIC:
        raise BadMagic(f"Bad magic bytes {data[:len(WIRE_MAGIC)]!r}.")
    if len(data) < HEADER_SIZE:
        raise Truncated(f"Packet has {len(data)} bytes, header needs {HEADER_SIZE}.")

    (
        _,
        version,
        sender_id,
        receiver_id,
        timestep,
        level,
        height,
        width,
        channels,
        count,
    ) = _HEADER.unpack_from(data)
    if version != WIRE_VERSION:
        raise UnsupportedVersion(f"Unsupported wire version {version}.")
    if min(height, width, channels) < 1:
        raise InvalidHeader(f"Invalid grid dimensions {channels}x{height}x{width}.")
    if count > height * width:
        raise InvalidHeader(f"{count} entries exceed the {height}x{width} grid.")

    dtype = _entry_dtype(channels)
    expected = HEADER_SIZE + count * dtype.itemsize
    if len(data) < expected:
        raise Truncated(f"Packet has {len(data)} bytes, {count} entries need {expected}.")
    if len(data) > expected:
        raise TrailingBytes(f"Packet has {len(data) - expected} bytes after its entries.")

    if count > 0:
        entries = np.frombuffer(data, dtype=dtype, count=count, offset=HEADER_SIZE)
    else:
        entries = np.zeros(0, dtype=dtype)
    rows = entries["row"].astype(np.int64)
    cols = entries["col"].astype(np.int64)
    values = np.array(entries["values"], dtype=np.float32).reshape(count, channels)

    if count > 0:
        if rows.max() >= height or cols.max() >= width:
            raise CellOutOfRange("Entry cell lies outside the grid.")
        steps = np.diff(rows * width + cols)
        if np.any(steps == 0):
            raise DuplicateCell("Packet repeats a cell.")
        if np.any(steps < 0):
            raise UnsortedCells("Packet entries are not sorted row-major.")
        if not np.isfinite(values).all():
            raise NonFiniteValue("Packet carries non-finite values.")

    return SparsePacket(
        sender_id=sender_id,
        receiver_id=receiver_id,
        timestep=timestep,
        level=level,
        height=height,
        width=width,
        channels=channels,
        rows=rows,
        cols=cols,
        values=values,
    )
