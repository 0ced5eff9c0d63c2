"""Pure-Python codec kernels.

Fallback for the compiled extension in ``_ckernels``; both implement the
same canonical little-endian rowset encoding and must stay byte-for-byte
identical:

    u32 nameCount
    per name:  u16 length, utf-8 bytes
    u32 rowCount
    per row:   u16 valueCount
    per value: u8 kind tag {0=Null, 1=Int64, 2=Uint64, 3=Double,
                            4=Boolean, 5=String}
               payload: 8 bytes LE for Int64/Uint64/Double, 1 byte for
               Boolean, u32 length + bytes for String, nothing for Null

``encode_values``/``decode_values`` reuse the per-row layout (u16 count +
tagged values) for journal keys and rows. ``hash_values`` feeds the same
tagged byte stream into FNV-1a 64; the Null tag byte participates so that
hashing never depends on column-presence quirks.

The model classes are injected via ``install_model`` to keep this module
free of imports from ``rows``.
"""

import struct

KIND_NULL = 0
KIND_INT64 = 1
KIND_UINT64 = 2
KIND_DOUBLE = 3
KIND_BOOLEAN = 4
KIND_STRING = 5

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF

_pack_i64 = struct.Struct("<q").pack
_pack_u64 = struct.Struct("<Q").pack
_pack_f64 = struct.Struct("<d").pack
_pack_u16 = struct.Struct("<H").pack
_pack_u32 = struct.Struct("<I").pack
_unpack_i64 = struct.Struct("<q").unpack_from
_unpack_u64 = struct.Struct("<Q").unpack_from
_unpack_f64 = struct.Struct("<d").unpack_from
_unpack_u16 = struct.Struct("<H").unpack_from
_unpack_u32 = struct.Struct("<I").unpack_from

_DataValue = None
_Row = None
_Rowset = None
_NameTable = None
_MalformedEncoding = ValueError


def install_model(data_value_cls, row_cls, rowset_cls, name_table_cls, malformed_exc):
    global _DataValue, _Row, _Rowset, _NameTable, _MalformedEncoding
    _DataValue = data_value_cls
    _Row = row_cls
    _Rowset = rowset_cls
    _NameTable = name_table_cls
    _MalformedEncoding = malformed_exc


def _append_value(out, value):
    kind = value.kind
    out.append(kind)
    if kind == KIND_NULL:
        return
    payload = value.payload
    if kind == KIND_INT64:
        out += _pack_i64(payload)
    elif kind == KIND_UINT64:
        out += _pack_u64(payload)
    elif kind == KIND_DOUBLE:
        out += _pack_f64(payload)
    elif kind == KIND_BOOLEAN:
        out.append(1 if payload else 0)
    elif kind == KIND_STRING:
        out += _pack_u32(len(payload))
        out += payload
    else:
        raise ValueError("unknown value kind %r" % (kind,))


def encode_rowset(rowset) -> bytes:
    out = bytearray()
    names = rowset.name_table.names
    out += _pack_u32(len(names))
    for name in names:
        raw = name.encode("utf-8")
        out += _pack_u16(len(raw))
        out += raw
    rows = rowset.rows
    out += _pack_u32(len(rows))
    for row in rows:
        values = row.values
        out += _pack_u16(len(values))
        for value in values:
            _append_value(out, value)
    return bytes(out)


def encode_values(values) -> bytes:
    out = bytearray()
    out += _pack_u16(len(values))
    for value in values:
        _append_value(out, value)
    return bytes(out)


def encoded_size(rowset) -> int:
    size = 8
    for name in rowset.name_table.names:
        size += 2 + len(name.encode("utf-8"))
    for row in rowset.rows:
        size += 2
        for value in row.values:
            kind = value.kind
            if kind == KIND_NULL:
                size += 1
            elif kind == KIND_BOOLEAN:
                size += 2
            elif kind == KIND_STRING:
                size += 5 + len(value.payload)
            else:
                size += 9
    return size


def _need(data, offset, count):
    if offset + count > len(data):
        raise _MalformedEncoding("truncated buffer at offset %d" % offset)


def _decode_value(data, offset):
    _need(data, offset, 1)
    kind = data[offset]
    offset += 1
    if kind == KIND_NULL:
        payload = None
    elif kind == KIND_INT64:
        _need(data, offset, 8)
        payload = _unpack_i64(data, offset)[0]
        offset += 8
    elif kind == KIND_UINT64:
        _need(data, offset, 8)
        payload = _unpack_u64(data, offset)[0]
        offset += 8
    elif kind == KIND_DOUBLE:
        _need(data, offset, 8)
        payload = _unpack_f64(data, offset)[0]
        offset += 8
    elif kind == KIND_BOOLEAN:
        _need(data, offset, 1)
        raw = data[offset]
        if raw > 1:
            raise _MalformedEncoding("boolean payload byte %d" % raw)
        payload = raw == 1
        offset += 1
    elif kind == KIND_STRING:
        _need(data, offset, 4)
        length = _unpack_u32(data, offset)[0]
        offset += 4
        _need(data, offset, length)
        payload = bytes(data[offset:offset + length])
        offset += length
    else:
        raise _MalformedEncoding("unknown kind tag %d" % kind)
    dv = _DataValue.__new__(_DataValue)
    dv.kind = kind
    dv.payload = payload
    return dv, offset


def decode_values(data, offset):
    _need(data, offset, 2)
    count = _unpack_u16(data, offset)[0]
    offset += 2
    values = []
    for _ in range(count):
        value, offset = _decode_value(data, offset)
        values.append(value)
    return tuple(values), offset


def decode_rowset(data) -> object:
    offset = 0
    _need(data, offset, 4)
    name_count = _unpack_u32(data, offset)[0]
    offset += 4
    names = []
    for _ in range(name_count):
        _need(data, offset, 2)
        length = _unpack_u16(data, offset)[0]
        offset += 2
        _need(data, offset, length)
        try:
            names.append(bytes(data[offset:offset + length]).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise _MalformedEncoding("column name is not utf-8") from exc
        offset += length
    try:
        name_table = _NameTable(names)
    except ValueError as exc:
        raise _MalformedEncoding(str(exc)) from exc
    _need(data, offset, 4)
    row_count = _unpack_u32(data, offset)[0]
    offset += 4
    rows = []
    for _ in range(row_count):
        values, offset = decode_values(data, offset)
        if len(values) > name_count:
            raise _MalformedEncoding(
                "row has %d values but name table has %d names"
                % (len(values), name_count)
            )
        row = _Row.__new__(_Row)
        row.values = values
        rows.append(row)
    if offset != len(data):
        raise _MalformedEncoding(
            "%d trailing bytes after rowset body" % (len(data) - offset)
        )
    return _Rowset(name_table, rows)


def hash_values(values) -> int:
    h = FNV_OFFSET
    for value in values:
        kind = value.kind
        h ^= kind
        h = (h * FNV_PRIME) & _U64_MASK
        if kind == KIND_NULL:
            continue
        payload = value.payload
        if kind == KIND_INT64:
            raw = _pack_i64(payload)
        elif kind == KIND_UINT64:
            raw = _pack_u64(payload)
        elif kind == KIND_DOUBLE:
            raw = _pack_f64(payload)
        elif kind == KIND_BOOLEAN:
            raw = b"\x01" if payload else b"\x00"
        elif kind == KIND_STRING:
            raw = _pack_u32(len(payload)) + payload
        else:
            raise ValueError("unknown value kind %r" % (kind,))
        for b in raw:
            h ^= b
            h = (h * FNV_PRIME) & _U64_MASK
    return h
