"""Append-only journal of committed store writes.

One length-prefixed record per committed transaction (or ordered-table
append, which journals as a single-op transaction):

    u32 recordLength
    u64 txSequence
    u32 entryCount
    per entry:
        u16 tableNameLength + utf-8 bytes
        encoded key      (value-list encoding from the row model)
        u8 flag          (1 = row follows, 0 = delete marker)
        encoded row      (value-list encoding, only when flag == 1)

Ordered appends use the row's absolute index, as a single Uint64, for the
key. The write-amplification meter parses this file and attributes bytes
per table, so the format is self-describing and strictly decoded.
"""

from __future__ import annotations

import struct
from typing import Iterator, List, Optional, Tuple

from .errors import MalformedEncoding
from .rows import Row, decode_values, encode_values, uint64

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_U16 = struct.Struct("<H")


class JournalEntry:
    __slots__ = ("table", "key", "row_values", "byte_size")

    def __init__(self, table: str, key: tuple, row_values: Optional[tuple],
                 byte_size: int):
        self.table = table
        self.key = key
        self.row_values = row_values  # None = delete marker
        self.byte_size = byte_size    # encoded size of this entry


class JournalRecord:
    __slots__ = ("sequence", "entries", "byte_size")

    def __init__(self, sequence: int, entries: List[JournalEntry],
                 byte_size: int):
        self.sequence = sequence
        self.entries = entries
        self.byte_size = byte_size    # full framed record size


def _encode_entry(table: str, key: tuple, row: Optional[Row]) -> bytes:
    name = table.encode("utf-8")
    parts = [_U16.pack(len(name)), name, encode_values(key)]
    if row is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(encode_values(row.values))
    return b"".join(parts)


class JournalWriter:
    """Writes framed records; flushes per record so crashes lose at most one."""

    def __init__(self, path: str):
        self.path = path
        self._file = open(path, "wb")
        self.bytes_written = 0
        self.records_written = 0

    def _write_record(self, sequence: int, entries: List[bytes]):
        body = _U64.pack(sequence) + _U32.pack(len(entries)) + b"".join(entries)
        framed = _U32.pack(len(body)) + body
        self._file.write(framed)
        self._file.flush()
        self.bytes_written += len(framed)
        self.records_written += 1

    def write_commit(self, record):
        entries = [
            _encode_entry(table, key, row)
            for table, key, row, _version in record.writes
        ]
        self._write_record(record.sequence, entries)

    def write_append(self, sequence: int, table: str, first_index: int,
                     rows: List[Row]):
        entries = [
            _encode_entry(table, (uint64(first_index + i),), row)
            for i, row in enumerate(rows)
        ]
        self._write_record(sequence, entries)

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_journal(path: str) -> Iterator[JournalRecord]:
    """Yield records; raises MalformedEncoding on a torn/corrupt record."""
    with open(path, "rb") as f:
        data = f.read()
    offset = 0
    total = len(data)
    while offset < total:
        if offset + 4 > total:
            raise MalformedEncoding("torn record length at offset %d" % offset)
        (length,) = _U32.unpack_from(data, offset)
        offset += 4
        if offset + length > total:
            raise MalformedEncoding("torn record body at offset %d" % offset)
        body = data[offset:offset + length]
        offset += length
        yield _parse_record(body, length + 4)


def _parse_record(body: bytes, framed_size: int) -> JournalRecord:
    if len(body) < 12:
        raise MalformedEncoding("record body shorter than header")
    (sequence,) = _U64.unpack_from(body, 0)
    (entry_count,) = _U32.unpack_from(body, 8)
    pos = 12
    entries = []
    for _ in range(entry_count):
        start = pos
        if pos + 2 > len(body):
            raise MalformedEncoding("torn entry header")
        (name_len,) = _U16.unpack_from(body, pos)
        pos += 2
        if pos + name_len > len(body):
            raise MalformedEncoding("torn table name")
        table = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        key, pos = decode_values(body, pos)
        if pos + 1 > len(body):
            raise MalformedEncoding("missing row flag")
        flag = body[pos]
        pos += 1
        if flag == 1:
            row_values, pos = decode_values(body, pos)
        elif flag == 0:
            row_values = None
        else:
            raise MalformedEncoding("unknown row flag %d" % flag)
        entries.append(JournalEntry(table, key, row_values, pos - start))
    if pos != len(body):
        raise MalformedEncoding("%d trailing bytes in record" % (len(body) - pos))
    return JournalRecord(sequence, entries, framed_size)


def bytes_by_table(path: str) -> dict:
    """Aggregate journaled entry bytes per table (meter helper)."""
    totals: dict = {}
    for record in read_journal(path):
        for entry in record.entries:
            totals[entry.table] = totals.get(entry.table, 0) + entry.byte_size
    return totals
