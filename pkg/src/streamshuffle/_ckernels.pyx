# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled codec kernels.

Byte-for-byte identical to ``_pykernels`` (the pure-Python fallback); see
that module's docstring for the wire layout. Integers are written with
explicit little-endian shifts so the output does not depend on host byte
order; doubles are reinterpreted as u64 bit patterns (IEEE-754 hosts).
"""

from cpython.bytes cimport PyBytes_FromStringAndSize, PyBytes_AS_STRING
from libc.string cimport memcpy

DEF KIND_NULL = 0
DEF KIND_INT64 = 1
DEF KIND_UINT64 = 2
DEF KIND_DOUBLE = 3
DEF KIND_BOOLEAN = 4
DEF KIND_STRING = 5

cdef unsigned long long FNV_OFFSET = 0xCBF29CE484222325ULL
cdef unsigned long long FNV_PRIME = 0x100000001B3ULL

FNV_OFFSET_PY = FNV_OFFSET
FNV_PRIME_PY = FNV_PRIME

cdef object _DataValue = None
cdef object _Row = None
cdef object _Rowset = None
cdef object _NameTable = None
cdef object _MalformedEncoding = ValueError


def install_model(data_value_cls, row_cls, rowset_cls, name_table_cls, malformed_exc):
    global _DataValue, _Row, _Rowset, _NameTable, _MalformedEncoding
    _DataValue = data_value_cls
    _Row = row_cls
    _Rowset = rowset_cls
    _NameTable = name_table_cls
    _MalformedEncoding = malformed_exc


cdef inline void _put_u16(char *buf, Py_ssize_t off, unsigned int v) noexcept:
    buf[off] = <char>(v & 0xFF)
    buf[off + 1] = <char>((v >> 8) & 0xFF)


cdef inline void _put_u32(char *buf, Py_ssize_t off, unsigned long v) noexcept:
    buf[off] = <char>(v & 0xFF)
    buf[off + 1] = <char>((v >> 8) & 0xFF)
    buf[off + 2] = <char>((v >> 16) & 0xFF)
    buf[off + 3] = <char>((v >> 24) & 0xFF)


cdef inline void _put_u64(char *buf, Py_ssize_t off, unsigned long long v) noexcept:
    cdef int i
    for i in range(8):
        buf[off + i] = <char>((v >> (8 * i)) & 0xFF)


cdef inline unsigned int _get_u16(const unsigned char *buf, Py_ssize_t off) noexcept:
    return buf[off] | (buf[off + 1] << 8)


cdef inline unsigned long _get_u32(const unsigned char *buf, Py_ssize_t off) noexcept:
    return (<unsigned long>buf[off]
            | (<unsigned long>buf[off + 1] << 8)
            | (<unsigned long>buf[off + 2] << 16)
            | (<unsigned long>buf[off + 3] << 24))


cdef inline unsigned long long _get_u64(const unsigned char *buf, Py_ssize_t off) noexcept:
    cdef unsigned long long v = 0
    cdef int i
    for i in range(8):
        v |= <unsigned long long>buf[off + i] << (8 * i)
    return v


cdef Py_ssize_t _value_size(object value) except -1:
    cdef long kind = value.kind
    if kind == KIND_NULL:
        return 1
    if kind == KIND_BOOLEAN:
        return 2
    if kind == KIND_STRING:
        return 5 + len(<bytes>value.payload)
    if kind == KIND_INT64 or kind == KIND_UINT64 or kind == KIND_DOUBLE:
        return 9
    raise ValueError("unknown value kind %r" % (kind,))


cdef Py_ssize_t _write_value(char *buf, Py_ssize_t off, object value) except -1:
    cdef long kind = value.kind
    cdef long long i64
    cdef unsigned long long u64
    cdef double f64
    cdef bytes raw
    cdef Py_ssize_t length
    buf[off] = <char>kind
    off += 1
    if kind == KIND_NULL:
        return off
    if kind == KIND_INT64:
        i64 = value.payload
        _put_u64(buf, off, <unsigned long long>i64)
        return off + 8
    if kind == KIND_UINT64:
        u64 = value.payload
        _put_u64(buf, off, u64)
        return off + 8
    if kind == KIND_DOUBLE:
        f64 = value.payload
        memcpy(&u64, &f64, 8)
        _put_u64(buf, off, u64)
        return off + 8
    if kind == KIND_BOOLEAN:
        buf[off] = 1 if value.payload else 0
        return off + 1
    if kind == KIND_STRING:
        raw = <bytes>value.payload
        length = len(raw)
        _put_u32(buf, off, <unsigned long>length)
        off += 4
        memcpy(buf + off, PyBytes_AS_STRING(raw), length)
        return off + length
    raise ValueError("unknown value kind %r" % (kind,))


def encoded_size(rowset):
    cdef Py_ssize_t size = 8
    cdef object name, row, value
    for name in rowset.name_table.names:
        size += 2 + len((<str>name).encode("utf-8"))
    for row in rowset.rows:
        size += 2
        for value in row.values:
            size += _value_size(value)
    return size


def encode_rowset(rowset):
    cdef list encoded_names = []
    cdef Py_ssize_t size = 8
    cdef object name, row, value
    cdef bytes raw
    for name in rowset.name_table.names:
        raw = (<str>name).encode("utf-8")
        encoded_names.append(raw)
        size += 2 + len(raw)
    rows = rowset.rows
    for row in rows:
        size += 2
        for value in row.values:
            size += _value_size(value)
    cdef bytes out = PyBytes_FromStringAndSize(NULL, size)
    cdef char *buf = PyBytes_AS_STRING(out)
    cdef Py_ssize_t off = 0
    _put_u32(buf, off, len(encoded_names))
    off += 4
    for raw in encoded_names:
        _put_u16(buf, off, <unsigned int>len(raw))
        off += 2
        memcpy(buf + off, PyBytes_AS_STRING(raw), len(raw))
        off += len(raw)
    _put_u32(buf, off, len(rows))
    off += 4
    for row in rows:
        values = row.values
        _put_u16(buf, off, <unsigned int>len(values))
        off += 2
        for value in values:
            off = _write_value(buf, off, value)
    return out


def encode_values(values):
    cdef Py_ssize_t size = 2
    cdef object value
    for value in values:
        size += _value_size(value)
    cdef bytes out = PyBytes_FromStringAndSize(NULL, size)
    cdef char *buf = PyBytes_AS_STRING(out)
    cdef Py_ssize_t off = 0
    _put_u16(buf, off, <unsigned int>len(values))
    off += 2
    for value in values:
        off = _write_value(buf, off, value)
    return out


cdef inline int _need(Py_ssize_t total, Py_ssize_t off, Py_ssize_t count) except -1:
    if off + count > total:
        raise _MalformedEncoding("truncated buffer at offset %d" % off)
    return 0


cdef object _read_value(const unsigned char *buf, Py_ssize_t total,
                        Py_ssize_t *off_io):
    cdef Py_ssize_t off = off_io[0]
    cdef unsigned int kind
    cdef unsigned long long u64
    cdef long long i64
    cdef double f64
    cdef unsigned long length
    cdef object payload
    _need(total, off, 1)
    kind = buf[off]
    off += 1
    if kind == KIND_NULL:
        payload = None
    elif kind == KIND_INT64:
        _need(total, off, 8)
        u64 = _get_u64(buf, off)
        i64 = <long long>u64
        payload = i64
        off += 8
    elif kind == KIND_UINT64:
        _need(total, off, 8)
        payload = _get_u64(buf, off)
        off += 8
    elif kind == KIND_DOUBLE:
        _need(total, off, 8)
        u64 = _get_u64(buf, off)
        memcpy(&f64, &u64, 8)
        payload = f64
        off += 8
    elif kind == KIND_BOOLEAN:
        _need(total, off, 1)
        if buf[off] > 1:
            raise _MalformedEncoding("boolean payload byte %d" % buf[off])
        payload = buf[off] == 1
        off += 1
    elif kind == KIND_STRING:
        _need(total, off, 4)
        length = _get_u32(buf, off)
        off += 4
        _need(total, off, <Py_ssize_t>length)
        payload = PyBytes_FromStringAndSize(<const char *>(buf + off), length)
        off += length
    else:
        raise _MalformedEncoding("unknown kind tag %d" % kind)
    dv = _DataValue.__new__(_DataValue)
    dv.kind = kind
    dv.payload = payload
    off_io[0] = off
    return dv


cdef tuple _read_values(const unsigned char *buf, Py_ssize_t total,
                        Py_ssize_t *off_io):
    cdef Py_ssize_t off = off_io[0]
    cdef unsigned int count
    cdef unsigned int i
    _need(total, off, 2)
    count = _get_u16(buf, off)
    off_io[0] = off + 2
    cdef list values = []
    for i in range(count):
        values.append(_read_value(buf, total, off_io))
    return tuple(values)


def decode_values(data, offset):
    cdef bytes raw = data if isinstance(data, bytes) else bytes(data)
    cdef const unsigned char *buf = <const unsigned char *>PyBytes_AS_STRING(raw)
    cdef Py_ssize_t total = len(raw)
    cdef Py_ssize_t off = offset
    values = _read_values(buf, total, &off)
    return values, off


def decode_rowset(data):
    cdef bytes raw = data if isinstance(data, bytes) else bytes(data)
    cdef const unsigned char *buf = <const unsigned char *>PyBytes_AS_STRING(raw)
    cdef Py_ssize_t total = len(raw)
    cdef Py_ssize_t off = 0
    cdef unsigned long name_count, row_count, i
    cdef unsigned int length
    _need(total, off, 4)
    name_count = _get_u32(buf, off)
    off += 4
    cdef list names = []
    for i in range(name_count):
        _need(total, off, 2)
        length = _get_u16(buf, off)
        off += 2
        _need(total, off, length)
        try:
            names.append(
                PyBytes_FromStringAndSize(<const char *>(buf + off), length)
                .decode("utf-8")
            )
        except UnicodeDecodeError as exc:
            raise _MalformedEncoding("column name is not utf-8") from exc
        off += length
    try:
        name_table = _NameTable(names)
    except ValueError as exc:
        raise _MalformedEncoding(str(exc)) from exc
    _need(total, off, 4)
    row_count = _get_u32(buf, off)
    off += 4
    cdef list rows = []
    cdef tuple values
    for i in range(row_count):
        values = _read_values(buf, total, &off)
        if len(values) > <Py_ssize_t>name_count:
            raise _MalformedEncoding(
                "row has %d values but name table has %d names"
                % (len(values), name_count)
            )
        row = _Row.__new__(_Row)
        row.values = values
        rows.append(row)
    if off != total:
        raise _MalformedEncoding(
            "%d trailing bytes after rowset body" % (total - off)
        )
    return _Rowset(name_table, rows)


def hash_values(values):
    cdef unsigned long long h = FNV_OFFSET
    cdef long kind
    cdef long long i64
    cdef unsigned long long u64
    cdef double f64
    cdef bytes raw
    cdef Py_ssize_t i, length
    cdef const unsigned char *p
    cdef unsigned char scratch[12]
    cdef object value
    for value in values:
        kind = value.kind
        h = (h ^ <unsigned long long>kind) * FNV_PRIME
        if kind == KIND_NULL:
            continue
        if kind == KIND_INT64:
            i64 = value.payload
            u64 = <unsigned long long>i64
            for i in range(8):
                h = (h ^ ((u64 >> (8 * i)) & 0xFF)) * FNV_PRIME
        elif kind == KIND_UINT64:
            u64 = value.payload
            for i in range(8):
                h = (h ^ ((u64 >> (8 * i)) & 0xFF)) * FNV_PRIME
        elif kind == KIND_DOUBLE:
            f64 = value.payload
            memcpy(&u64, &f64, 8)
            for i in range(8):
                h = (h ^ ((u64 >> (8 * i)) & 0xFF)) * FNV_PRIME
        elif kind == KIND_BOOLEAN:
            h = (h ^ (1 if value.payload else 0)) * FNV_PRIME
        elif kind == KIND_STRING:
            raw = <bytes>value.payload
            length = len(raw)
            _put_u32(<char *>scratch, 0, <unsigned long>length)
            for i in range(4):
                h = (h ^ scratch[i]) * FNV_PRIME
            p = <const unsigned char *>PyBytes_AS_STRING(raw)
            for i in range(length):
                h = (h ^ p[i]) * FNV_PRIME
        else:
            raise ValueError("unknown value kind %r" % (kind,))
    return h
