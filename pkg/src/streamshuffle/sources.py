"""Partition readers and continuation tokens.

Two source flavors exercise the same reader interface:

* index flavor — backed by an ordered store table with dense absolute
  indexes; the token is simply the next absolute index.
* offset flavor — a log whose entries carry monotonically increasing but
  deliberately non-sequential offsets (random skips of 1-3), spread over
  several sub-streams; the token holds the next offset per sub-stream.
  Offsets are drawn from one per-partition sequencer so a later append is
  always ordered after everything already present — reads merge
  sub-streams by offset and can never see a previously returned prefix
  reorder itself.

``read`` is deterministic from a token: replaying any token returns the
same rows in the same order. ``trim`` marks everything before the token
as committed; it is idempotent and may be deferred (``defer`` hook) to
model sources that trim lazily. Input-numbering of returned rows is the
caller's business; readers only hand back rows plus the next token.

Token wire form: u8 source-kind tag, then u64 next-index (index flavor)
or u32 sub-stream count + u64 per sub-stream (offset flavor).
"""

from __future__ import annotations

import random
import struct
from typing import Callable, List, Optional, Tuple

from .errors import InvalidToken
from .rows import NameTable, Rowset, remap_rows
from .store import StateStore

_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")

TOKEN_KIND_INDEX = 1
TOKEN_KIND_OFFSET = 2


class IndexToken:
    __slots__ = ("next_index",)

    def __init__(self, next_index: int):
        self.next_index = next_index

    def __eq__(self, other):
        return isinstance(other, IndexToken) and other.next_index == self.next_index

    def __repr__(self):
        return "IndexToken(%d)" % self.next_index


class OffsetToken:
    __slots__ = ("next_offsets",)

    def __init__(self, next_offsets):
        self.next_offsets = tuple(next_offsets)

    def __eq__(self, other):
        return (
            isinstance(other, OffsetToken)
            and other.next_offsets == self.next_offsets
        )

    def __repr__(self):
        return "OffsetToken(%r)" % (self.next_offsets,)


def serialize_token(token) -> bytes:
    if isinstance(token, IndexToken):
        return bytes([TOKEN_KIND_INDEX]) + _U64.pack(token.next_index)
    if isinstance(token, OffsetToken):
        out = bytearray([TOKEN_KIND_OFFSET])
        out += _U32.pack(len(token.next_offsets))
        for offset in token.next_offsets:
            out += _U64.pack(offset)
        return bytes(out)
    raise InvalidToken("unknown token type %r" % type(token))


def deserialize_token(data: bytes):
    if len(data) < 1:
        raise InvalidToken("empty token payload")
    kind = data[0]
    if kind == TOKEN_KIND_INDEX:
        if len(data) != 9:
            raise InvalidToken("index token must be 9 bytes, got %d" % len(data))
        return IndexToken(_U64.unpack_from(data, 1)[0])
    if kind == TOKEN_KIND_OFFSET:
        if len(data) < 5:
            raise InvalidToken("offset token header truncated")
        (count,) = _U32.unpack_from(data, 1)
        if len(data) != 5 + 8 * count:
            raise InvalidToken("offset token length mismatch")
        return OffsetToken(
            _U64.unpack_from(data, 5 + 8 * i)[0] for i in range(count)
        )
    raise InvalidToken("unknown token kind tag %d" % kind)


class ReadResult:
    __slots__ = ("rowset", "next_token")

    def __init__(self, rowset: Rowset, next_token):
        self.rowset = rowset
        self.next_token = next_token


class PartitionReader:
    """One mapper's handle on one input partition."""

    def initial_token(self):
        raise NotImplementedError

    def read(self, begin_row_index: int, end_row_index: int, token) -> ReadResult:
        raise NotImplementedError

    def trim(self, row_index: int, token):
        raise NotImplementedError


def _run_deferred(defer: Optional[Callable], fn: Callable):
    # Trim may take effect asynchronously; without a scheduler it is
    # immediate.
    if defer is None:
        fn()
    else:
        defer(fn)


class OrderedTablePartitionReader(PartitionReader):
    """Index-flavor reader over an ordered store table.

    The token is authoritative for ``trim``; the rowIndex argument is
    advisory only for this flavor (the token already is an absolute
    index).
    """

    def __init__(self, store: StateStore, table_name: str,
                 defer: Optional[Callable] = None,
                 fault_hook: Optional[Callable] = None):
        self.store = store
        self.table_name = table_name
        self.defer = defer
        self.fault_hook = fault_hook

    def _check(self, token) -> IndexToken:
        if not isinstance(token, IndexToken):
            raise InvalidToken(
                "index reader got %s" % type(token).__name__
            )
        return token

    def initial_token(self) -> IndexToken:
        return IndexToken(self.store.table_trimmed_up_to(self.table_name))

    def read(self, begin_row_index: int, end_row_index: int, token) -> ReadResult:
        token = self._check(token)
        if self.fault_hook is not None:
            self.fault_hook()
        budget = end_row_index - begin_row_index
        if budget < 0:
            raise ValueError("end_row_index below begin_row_index")
        rowset = self.store.read_range(
            self.table_name, token.next_index, token.next_index + budget
        )
        return ReadResult(rowset, IndexToken(token.next_index + len(rowset)))

    def trim(self, row_index: int, token):
        token = self._check(token)
        up_to = token.next_index
        _run_deferred(
            self.defer, lambda: self.store.trim_table(self.table_name, up_to)
        )


class OffsetSequencer:
    """Hands out strictly increasing offsets with random gaps of 1-3."""

    def __init__(self, seed: int):
        self._rng = random.Random(seed)
        self._current = -1

    def next_offset(self) -> int:
        self._current += self._rng.randint(1, 3)
        return self._current


class OffsetLogPartition:
    """Offset-flavor source: sub-streams of (offset, row) entries."""

    def __init__(self, sub_stream_count: int, seed: int, columns=()):
        if sub_stream_count < 1:
            raise ValueError("need at least one sub-stream")
        self.name_table = NameTable(columns)
        self.sequencer = OffsetSequencer(seed)
        self.streams: List[List[Tuple[int, object]]] = [
            [] for _ in range(sub_stream_count)
        ]
        # Offset floor below which entries have been physically removed.
        self.removed_below: List[int] = [0] * sub_stream_count

    @property
    def sub_stream_count(self) -> int:
        return len(self.streams)

    def append(self, sub_stream: int, rowset: Rowset) -> List[int]:
        rows = remap_rows(rowset, self.name_table)
        offsets = []
        for row in rows:
            offset = self.sequencer.next_offset()
            self.streams[sub_stream].append((offset, row))
            offsets.append(offset)
        return offsets

    def total_entries(self) -> int:
        return sum(len(s) for s in self.streams)


class OffsetLogPartitionReader(PartitionReader):
    """Offset-flavor reader; merges sub-streams ascending by offset."""

    def __init__(self, partition: OffsetLogPartition,
                 defer: Optional[Callable] = None,
                 fault_hook: Optional[Callable] = None):
        self.partition = partition
        self.defer = defer
        self.fault_hook = fault_hook

    def _check(self, token) -> OffsetToken:
        if not isinstance(token, OffsetToken):
            raise InvalidToken("offset reader got %s" % type(token).__name__)
        if len(token.next_offsets) != self.partition.sub_stream_count:
            raise InvalidToken(
                "token tracks %d sub-streams, source has %d"
                % (len(token.next_offsets), self.partition.sub_stream_count)
            )
        return token

    def initial_token(self) -> OffsetToken:
        floors = []
        for i, stream in enumerate(self.partition.streams):
            if stream:
                floors.append(stream[0][0])
            else:
                floors.append(self.partition.removed_below[i])
        return OffsetToken(floors)

    def read(self, begin_row_index: int, end_row_index: int, token) -> ReadResult:
        token = self._check(token)
        if self.fault_hook is not None:
            self.fault_hook()
        budget = end_row_index - begin_row_index
        if budget < 0:
            raise ValueError("end_row_index below begin_row_index")
        candidates = []
        for i, stream in enumerate(self.partition.streams):
            floor = token.next_offsets[i]
            for offset, row in stream:
                if offset >= floor:
                    candidates.append((offset, i, row))
        candidates.sort()
        taken = candidates[:budget]
        floors = list(token.next_offsets)
        rows = []
        for offset, stream_index, row in taken:
            rows.append(row)
            floors[stream_index] = offset + 1
        return ReadResult(
            Rowset(self.partition.name_table, rows), OffsetToken(floors)
        )

    def trim(self, row_index: int, token):
        token = self._check(token)
        floors = token.next_offsets

        def apply():
            for i, stream in enumerate(self.partition.streams):
                floor = floors[i]
                keep = [(o, r) for o, r in stream if o >= floor]
                if len(keep) != len(stream):
                    self.partition.streams[i] = keep
                self.partition.removed_below[i] = max(
                    self.partition.removed_below[i], floor
                )

        _run_deferred(self.defer, apply)
