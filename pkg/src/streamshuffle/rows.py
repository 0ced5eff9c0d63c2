"""Schematized row model and its canonical binary codec.

A :class:`Rowset` is an ordered list of rows sharing one append-only
:class:`NameTable`; value ``i`` of a row belongs to column ``i`` of the
table, and rows may omit trailing columns. Values are typed scalars
(:class:`DataValue`) over six kinds. Encoding the same logical rowset
always yields the same bytes, so fingerprints and journal byte counts are
stable across runs and across the compiled/pure codec backends.

The codec kernels (encode/decode/size/hash) come from the compiled
``_ckernels`` extension when it imported successfully, else from the
pure-Python ``_pykernels`` module. Set ``STREAMSHUFFLE_PURE=1`` to force
the fallback; ``codec_backend()`` reports which one is live.
"""

from __future__ import annotations

import enum
import os
from typing import Iterable, Optional, Sequence

from .errors import MalformedEncoding, MissingKeyColumn


class Kind(enum.IntEnum):
    """Value kind tags; the numeric values are the on-wire tag bytes."""

    NULL = 0
    INT64 = 1
    UINT64 = 2
    DOUBLE = 3
    BOOLEAN = 4
    STRING = 5


_INT64_MIN = -(1 << 63)
_INT64_MAX = (1 << 63) - 1
_UINT64_MAX = (1 << 64) - 1


class DataValue:
    """One typed scalar. Treat as immutable after construction.

    ``payload`` is ``None`` for Null, ``int`` for Int64/Uint64, ``float``
    for Double, ``bool`` for Boolean, and ``bytes`` for String.
    """

    __slots__ = ("kind", "payload")

    def __init__(self, kind: int, payload):
        self.kind = int(kind)
        self.payload = payload

    def __eq__(self, other):
        if not isinstance(other, DataValue):
            return NotImplemented
        return self.kind == other.kind and self.payload == other.payload

    def __hash__(self):
        return hash((self.kind, self.payload))

    def __repr__(self):
        if self.kind == Kind.NULL:
            return "null()"
        return "%s(%r)" % (Kind(self.kind).name.lower(), self.payload)

    def as_python(self):
        """Payload as a plain Python value (str for String columns)."""
        if self.kind == Kind.STRING:
            return self.payload.decode("utf-8")
        return self.payload


def null() -> DataValue:
    return DataValue(Kind.NULL, None)


def int64(v: int) -> DataValue:
    v = int(v)
    if not _INT64_MIN <= v <= _INT64_MAX:
        raise ValueError("int64 out of range: %d" % v)
    return DataValue(Kind.INT64, v)


def uint64(v: int) -> DataValue:
    v = int(v)
    if not 0 <= v <= _UINT64_MAX:
        raise ValueError("uint64 out of range: %d" % v)
    return DataValue(Kind.UINT64, v)


def double(v: float) -> DataValue:
    return DataValue(Kind.DOUBLE, float(v))


def boolean(v: bool) -> DataValue:
    return DataValue(Kind.BOOLEAN, bool(v))


def string(v) -> DataValue:
    if isinstance(v, str):
        v = v.encode("utf-8")
    elif not isinstance(v, (bytes, bytearray)):
        raise TypeError("string() takes str or bytes, got %r" % type(v))
    return DataValue(Kind.STRING, bytes(v))


NULL = null()


class NameTable:
    """Append-only registry of column names; position is identity."""

    __slots__ = ("_names", "_index")

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        for name in names:
            if name in self._index:
                raise ValueError("duplicate column name %r" % name)
            self._index[name] = len(self._names)
            self._names.append(name)

    @property
    def names(self) -> tuple:
        return tuple(self._names)

    def register(self, name: str) -> int:
        """Return the position of ``name``, appending it if new."""
        pos = self._index.get(name)
        if pos is None:
            pos = len(self._names)
            self._index[name] = pos
            self._names.append(name)
        return pos

    def index_of(self, name: str) -> Optional[int]:
        return self._index.get(name)

    def __len__(self):
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __eq__(self, other):
        if not isinstance(other, NameTable):
            return NotImplemented
        return self._names == other._names

    def __hash__(self):
        return hash(tuple(self._names))

    def __repr__(self):
        return "NameTable(%r)" % (self._names,)


class Row:
    """A tuple of values positionally bound to the owning name table."""

    __slots__ = ("values",)

    def __init__(self, values: Iterable[DataValue]):
        self.values = tuple(values)

    def __eq__(self, other):
        if not isinstance(other, Row):
            return NotImplemented
        return self.values == other.values

    def __hash__(self):
        return hash(self.values)

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return "Row(%r)" % (self.values,)


class Rowset:
    """An ordered batch of rows over one shared name table."""

    __slots__ = ("name_table", "rows")

    def __init__(self, name_table: NameTable, rows: Iterable[Row] = ()):
        rows = tuple(rows)
        width = len(name_table)
        for row in rows:
            if len(row.values) > width:
                raise ValueError(
                    "row has %d values but name table has %d names"
                    % (len(row.values), width)
                )
        self.name_table = name_table
        self.rows = rows

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        if not isinstance(other, Rowset):
            return NotImplemented
        return (
            self.name_table.names == other.name_table.names
            and self.rows == other.rows
        )

    def __repr__(self):
        return "Rowset(%r, %d rows)" % (self.name_table.names, len(self.rows))

    def value(self, row: Row, name: str) -> DataValue:
        """Value of ``name`` in ``row``; Null when the row omits it."""
        pos = self.name_table.index_of(name)
        if pos is None or pos >= len(row.values):
            return NULL
        return row.values[pos]


def empty_rowset(names: Iterable[str] = ()) -> Rowset:
    return Rowset(NameTable(names), ())


def remap_rows(rowset: Rowset, target: NameTable) -> list:
    """Re-seat ``rowset``'s rows onto ``target``, registering new names.

    Positions that exist in ``target`` but not in the source row are
    filled with Null so the value arrays stay dense. Identical tables are
    passed through untouched.
    """
    source = rowset.name_table
    if source.names == target.names[: len(source)]:
        # Source columns form a prefix of the target: positions coincide.
        return list(rowset.rows)
    positions = [target.register(name) for name in source.names]
    width = len(target)
    out = []
    for row in rowset.rows:
        values = [NULL] * width
        for i, value in enumerate(row.values):
            values[positions[i]] = value
        # Trim trailing nulls beyond the highest occupied position to keep
        # encodings canonical regardless of remap history.
        top = len(values)
        while top > 0 and values[top - 1].kind == Kind.NULL:
            top -= 1
        out.append(Row(values[:top]))
    return out


# --- codec backend selection -------------------------------------------

from . import _pykernels

_pykernels.install_model(DataValue, Row, Rowset, NameTable, MalformedEncoding)

try:
    from . import _ckernels
except ImportError:
    _ckernels = None
else:
    _ckernels.install_model(DataValue, Row, Rowset, NameTable, MalformedEncoding)

if _ckernels is not None and not os.environ.get("STREAMSHUFFLE_PURE"):
    _kernels = _ckernels
    _BACKEND = "compiled"
else:
    _kernels = _pykernels
    _BACKEND = "pure"

encode_rowset = _kernels.encode_rowset
decode_rowset = _kernels.decode_rowset
encoded_size = _kernels.encoded_size
encode_values = _kernels.encode_values
decode_values = _kernels.decode_values
hash_values = _kernels.hash_values


def codec_backend() -> str:
    """``"compiled"`` or ``"pure"``, whichever is serving the codec."""
    return _BACKEND


def key_values(rowset: Rowset, row: Row, key_columns: Sequence[str]) -> tuple:
    """Extract the key tuple for hashing/partitioning.

    Every key column must exist in the name table; a row that omits a key
    column contributes Null (which still hashes, via its tag byte).
    """
    values = []
    for name in key_columns:
        pos = rowset.name_table.index_of(name)
        if pos is None:
            raise MissingKeyColumn("key column %r not in name table" % name)
        values.append(row.values[pos] if pos < len(row.values) else NULL)
    return tuple(values)


def hash_partition(rowset: Rowset, row: Row, key_columns: Sequence[str],
                   partition_count: int) -> int:
    """FNV-1a of the key values, reduced modulo ``partition_count``."""
    if partition_count <= 0:
        raise ValueError("partition_count must be positive")
    return hash_values(key_values(rowset, row, key_columns)) % partition_count


def partition_rowset(rowset: Rowset, key_columns: Sequence[str],
                     partition_count: int) -> "PartitionedRowset":
    indexes = tuple(
        hash_partition(rowset, row, key_columns, partition_count)
        for row in rowset.rows
    )
    return PartitionedRowset(rowset, indexes)


class PartitionedRowset:
    """A rowset paired with a per-row target partition index."""

    __slots__ = ("rowset", "partition_indexes")

    def __init__(self, rowset: Rowset, partition_indexes: Sequence[int]):
        partition_indexes = tuple(partition_indexes)
        if len(partition_indexes) != len(rowset.rows):
            raise ValueError(
                "%d partition indexes for %d rows"
                % (len(partition_indexes), len(rowset.rows))
            )
        self.rowset = rowset
        self.partition_indexes = partition_indexes

    def __len__(self):
        return len(self.rowset)

    def select(self, partition: int) -> list:
        """Rows routed to ``partition``, in rowset order."""
        return [
            row
            for row, idx in zip(self.rowset.rows, self.partition_indexes)
            if idx == partition
        ]
