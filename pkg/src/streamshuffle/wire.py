"""GetRows wire schema and framing.

Messages travel as frames: u32 frame length, u8 message kind
{0=GetRowsRequest, 1=GetRowsResponse, 2=Error}, protobuf-style tagged
varint fields, a 0x00 terminator (field number 0 is invalid, so it
unambiguously ends the field section), then attachments, each with a u32
length prefix.

Field numbers:

    TReqGetRows: count=1, reducer_index=2, committed_row_index=3 (int64,
        may be -1), mapper_id=4 (string)
    TRspGetRows: row_count=1, last_shuffle_row_index=2 (omitted when the
        response carries no rows)
    Error:       code=1, message=2 (string)

int64 fields use protobuf int64 semantics: negatives encode as 10-byte
two's-complement varints. Unknown fields are skipped by wire type so the
schema can grow. The simulated fabric and the live TCP transport carry
these exact bytes.
"""

from __future__ import annotations

import struct
from typing import List, Optional, Tuple

from .errors import MalformedEncoding

_U32 = struct.Struct("<I")

KIND_REQUEST = 0
KIND_RESPONSE = 1
KIND_ERROR = 2

# Error codes carried by kind-2 messages.
ERR_STALE_MAPPER_ID = 1
ERR_BAD_REQUEST = 2
ERR_INTERNAL = 3

_U64_MASK = 0xFFFFFFFFFFFFFFFF
_WIRE_VARINT = 0
_WIRE_BYTES = 2


def _encode_varint(out: bytearray, value: int):
    value &= _U64_MASK
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _decode_varint(data: bytes, pos: int) -> Tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise MalformedEncoding("truncated varint")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            break
        shift += 7
        if shift > 63:
            raise MalformedEncoding("varint longer than 64 bits")
    return result & _U64_MASK, pos


def _to_int64(value: int) -> int:
    return value - (1 << 64) if value >= 1 << 63 else value


def _put_int64(out: bytearray, field: int, value: int):
    _encode_varint(out, (field << 3) | _WIRE_VARINT)
    _encode_varint(out, value)


def _put_bytes(out: bytearray, field: int, value: bytes):
    _encode_varint(out, (field << 3) | _WIRE_BYTES)
    _encode_varint(out, len(value))
    out += value


class GetRowsRequest:
    __slots__ = ("count", "reducer_index", "committed_row_index", "mapper_id")

    def __init__(self, count: int, reducer_index: int,
                 committed_row_index: int, mapper_id: str):
        self.count = count
        self.reducer_index = reducer_index
        self.committed_row_index = committed_row_index
        self.mapper_id = mapper_id

    def __eq__(self, other):
        return isinstance(other, GetRowsRequest) and (
            (self.count, self.reducer_index, self.committed_row_index,
             self.mapper_id)
            == (other.count, other.reducer_index, other.committed_row_index,
                other.mapper_id)
        )

    def __repr__(self):
        return (
            "GetRowsRequest(count=%d, reducer_index=%d, "
            "committed_row_index=%d, mapper_id=%r)"
            % (self.count, self.reducer_index, self.committed_row_index,
               self.mapper_id)
        )


class GetRowsResponse:
    __slots__ = ("row_count", "last_shuffle_row_index", "attachments")

    def __init__(self, row_count: int,
                 last_shuffle_row_index: Optional[int],
                 attachments: List[bytes] = ()):
        self.row_count = row_count
        self.last_shuffle_row_index = last_shuffle_row_index
        self.attachments = list(attachments)

    def __eq__(self, other):
        return isinstance(other, GetRowsResponse) and (
            (self.row_count, self.last_shuffle_row_index, self.attachments)
            == (other.row_count, other.last_shuffle_row_index,
                other.attachments)
        )

    def __repr__(self):
        return (
            "GetRowsResponse(row_count=%d, last_shuffle_row_index=%r, "
            "%d attachments)"
            % (self.row_count, self.last_shuffle_row_index,
               len(self.attachments))
        )


class WireError:
    __slots__ = ("code", "message")

    def __init__(self, code: int, message: str):
        self.code = code
        self.message = message

    def __eq__(self, other):
        return isinstance(other, WireError) and (
            (self.code, self.message) == (other.code, other.message)
        )

    def __repr__(self):
        return "WireError(code=%d, message=%r)" % (self.code, self.message)


def encode_message(msg) -> bytes:
    out = bytearray()
    if isinstance(msg, GetRowsRequest):
        out.append(KIND_REQUEST)
        _put_int64(out, 1, msg.count)
        _put_int64(out, 2, msg.reducer_index)
        _put_int64(out, 3, msg.committed_row_index)
        _put_bytes(out, 4, msg.mapper_id.encode("utf-8"))
        attachments = ()
    elif isinstance(msg, GetRowsResponse):
        out.append(KIND_RESPONSE)
        _put_int64(out, 1, msg.row_count)
        if msg.last_shuffle_row_index is not None:
            _put_int64(out, 2, msg.last_shuffle_row_index)
        attachments = msg.attachments
    elif isinstance(msg, WireError):
        out.append(KIND_ERROR)
        _put_int64(out, 1, msg.code)
        _put_bytes(out, 2, msg.message.encode("utf-8"))
        attachments = ()
    else:
        raise TypeError("cannot encode %r" % type(msg))
    out.append(0)  # field-section terminator
    for attachment in attachments:
        out += _U32.pack(len(attachment))
        out += attachment
    return bytes(out)


def _decode_fields(data: bytes, pos: int):
    """Read tagged fields until the 0x00 terminator; skip unknown ones."""
    fields = {}
    while True:
        if pos >= len(data):
            raise MalformedEncoding("missing field terminator")
        if data[pos] == 0:
            return fields, pos + 1
        tag, pos = _decode_varint(data, pos)
        field = tag >> 3
        wire_type = tag & 0x7
        if wire_type == _WIRE_VARINT:
            value, pos = _decode_varint(data, pos)
            fields[field] = ("v", value)
        elif wire_type == _WIRE_BYTES:
            length, pos = _decode_varint(data, pos)
            if pos + length > len(data):
                raise MalformedEncoding("truncated length-delimited field")
            fields[field] = ("b", data[pos:pos + length])
            pos += length
        else:
            raise MalformedEncoding("unsupported wire type %d" % wire_type)


def _field_int64(fields, number, default=None):
    entry = fields.get(number)
    if entry is None:
        return default
    kind, value = entry
    if kind != "v":
        raise MalformedEncoding("field %d is not a varint" % number)
    return _to_int64(value)


def _field_bytes(fields, number, default=None):
    entry = fields.get(number)
    if entry is None:
        return default
    kind, value = entry
    if kind != "b":
        raise MalformedEncoding("field %d is not length-delimited" % number)
    return value


def _decode_attachments(data: bytes, pos: int) -> List[bytes]:
    attachments = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise MalformedEncoding("truncated attachment length")
        (length,) = _U32.unpack_from(data, pos)
        pos += 4
        if pos + length > len(data):
            raise MalformedEncoding("truncated attachment body")
        attachments.append(data[pos:pos + length])
        pos += length
    return attachments


def decode_message(data: bytes):
    if not data:
        raise MalformedEncoding("empty message")
    kind = data[0]
    fields, pos = _decode_fields(data, 1)
    attachments = _decode_attachments(data, pos)
    if kind == KIND_REQUEST:
        if attachments:
            raise MalformedEncoding("request carries attachments")
        mapper_id = _field_bytes(fields, 4)
        return GetRowsRequest(
            count=_field_int64(fields, 1, 0),
            reducer_index=_field_int64(fields, 2, 0),
            committed_row_index=_field_int64(fields, 3, -1),
            mapper_id="" if mapper_id is None else mapper_id.decode("utf-8"),
        )
    if kind == KIND_RESPONSE:
        return GetRowsResponse(
            row_count=_field_int64(fields, 1, 0),
            last_shuffle_row_index=_field_int64(fields, 2, None),
            attachments=attachments,
        )
    if kind == KIND_ERROR:
        message = _field_bytes(fields, 2, b"")
        return WireError(
            code=_field_int64(fields, 1, 0),
            message=message.decode("utf-8"),
        )
    raise MalformedEncoding("unknown message kind %d" % kind)


def encode_frame(msg) -> bytes:
    body = encode_message(msg)
    return _U32.pack(len(body)) + body


def decode_frame(data: bytes, pos: int = 0):
    """Decode one frame at ``pos``; returns (message, new_pos).

    Returns (None, pos) when the buffer does not yet hold a full frame,
    so callers can accumulate stream reads.
    """
    if pos + 4 > len(data):
        return None, pos
    (length,) = _U32.unpack_from(data, pos)
    if pos + 4 + length > len(data):
        return None, pos
    body = data[pos + 4:pos + 4 + length]
    return decode_message(body), pos + 4 + length
