"""Wire schema, framing, and live-socket smoke tests."""

import random
import socket
import threading

import pytest

from streamshuffle import rows as R
from streamshuffle import wire as W
from streamshuffle.errors import MalformedEncoding


def test_request_round_trip():
    req = W.GetRowsRequest(
        count=512, reducer_index=3, committed_row_index=-1, mapper_id="guid-7"
    )
    assert W.decode_message(W.encode_message(req)) == req


def test_request_field_layout():
    # count=1 varint, reducer_index=2 varint, committed=3 varint,
    # mapper_id=4 length-delimited; then the 0x00 terminator.
    data = W.encode_message(
        W.GetRowsRequest(count=2, reducer_index=1, committed_row_index=5,
                         mapper_id="ab")
    )
    assert data == bytes(
        [W.KIND_REQUEST,
         (1 << 3) | 0, 2,
         (2 << 3) | 0, 1,
         (3 << 3) | 0, 5,
         (4 << 3) | 2, 2, ord("a"), ord("b"),
         0]
    )


def test_negative_int64_ten_byte_varint():
    data = W.encode_message(
        W.GetRowsRequest(count=0, reducer_index=0, committed_row_index=-1,
                         mapper_id="")
    )
    req = W.decode_message(data)
    assert req.committed_row_index == -1
    # -1 must occupy the full 10-byte two's-complement varint.
    idx = data.index(bytes([(3 << 3) | 0]))
    varint = data[idx + 1:idx + 11]
    assert varint == b"\xff\xff\xff\xff\xff\xff\xff\xff\xff\x01"


def test_response_round_trip_with_attachments():
    rowset = R.Rowset(R.NameTable(["v"]), [R.Row([R.int64(4)])])
    resp = W.GetRowsResponse(
        row_count=1,
        last_shuffle_row_index=12,
        attachments=[R.encode_rowset(rowset), b"raw-extra"],
    )
    back = W.decode_message(W.encode_message(resp))
    assert back == resp
    assert R.decode_rowset(back.attachments[0]) == rowset


def test_empty_response_omits_last_index():
    resp = W.GetRowsResponse(row_count=0, last_shuffle_row_index=None)
    data = W.encode_message(resp)
    back = W.decode_message(data)
    assert back.row_count == 0
    assert back.last_shuffle_row_index is None
    # Only the row_count field appears before the terminator.
    assert data == bytes([W.KIND_RESPONSE, (1 << 3) | 0, 0, 0])


def test_error_round_trip():
    err = W.WireError(W.ERR_STALE_MAPPER_ID, "mapper id mismatch")
    assert W.decode_message(W.encode_message(err)) == err


def test_unknown_fields_skipped():
    base = W.encode_message(
        W.GetRowsResponse(row_count=3, last_shuffle_row_index=9)
    )
    # Splice an unknown varint field 7 and unknown bytes field 9 before
    # the terminator.
    spliced = base[:-1] + bytes([(7 << 3) | 0, 42, (9 << 3) | 2, 1, 0xEE]) + b"\x00"
    back = W.decode_message(spliced)
    assert back.row_count == 3
    assert back.last_shuffle_row_index == 9


def test_malformed_messages_rejected():
    good = W.encode_message(
        W.GetRowsRequest(count=1, reducer_index=0, committed_row_index=0,
                         mapper_id="x")
    )
    with pytest.raises(MalformedEncoding):
        W.decode_message(b"")
    with pytest.raises(MalformedEncoding):
        W.decode_message(good[:-2])  # lost terminator
    with pytest.raises(MalformedEncoding):
        W.decode_message(bytes([9]) + good[1:])  # unknown kind
    with pytest.raises(MalformedEncoding):
        # wire type 5 is unsupported
        W.decode_message(bytes([W.KIND_RESPONSE, (1 << 3) | 5, 0, 0]))
    resp = W.encode_message(
        W.GetRowsResponse(row_count=1, last_shuffle_row_index=1,
                          attachments=[b"abc"])
    )
    with pytest.raises(MalformedEncoding):
        W.decode_message(resp[:-1])  # truncated attachment


def test_frame_accumulation():
    msgs = [
        W.GetRowsRequest(count=i, reducer_index=0, committed_row_index=-1,
                         mapper_id="m")
        for i in range(5)
    ]
    stream = b"".join(W.encode_frame(m) for m in msgs)
    # Feed the stream byte by byte; decoder must wait for whole frames.
    buffer = b""
    decoded = []
    for byte in stream:
        buffer += bytes([byte])
        msg, pos = W.decode_frame(buffer)
        if msg is not None:
            decoded.append(msg)
            buffer = buffer[pos:]
    assert decoded == msgs


def test_random_round_trip():
    rng = random.Random(2024)
    for _ in range(300):
        kind = rng.randrange(3)
        if kind == 0:
            msg = W.GetRowsRequest(
                count=rng.randrange(1 << 20),
                reducer_index=rng.randrange(64),
                committed_row_index=rng.randrange(-1, 1 << 40),
                mapper_id="guid-%d" % rng.randrange(1 << 30),
            )
        elif kind == 1:
            msg = W.GetRowsResponse(
                row_count=rng.randrange(1 << 16),
                last_shuffle_row_index=(
                    None if rng.random() < 0.3 else rng.randrange(1 << 40)
                ),
                attachments=[
                    bytes(rng.randrange(256) for _ in range(rng.randrange(40)))
                    for _ in range(rng.randrange(3))
                ],
            )
        else:
            msg = W.WireError(rng.randrange(1, 4), "e%d" % rng.randrange(100))
        assert W.decode_message(W.encode_message(msg)) == msg


def test_live_tcp_smoke():
    # The same frames cross a real socket: a one-shot echo-style server
    # answers any request with a fixed response.
    rowset = R.Rowset(R.NameTable(["v"]), [R.Row([R.int64(1)])])
    response = W.GetRowsResponse(
        row_count=1, last_shuffle_row_index=5,
        attachments=[R.encode_rowset(rowset)],
    )
    server = socket.socket()
    server.bind(("127.0.0.1", 0))
    server.listen(1)
    port = server.getsockname()[1]

    def serve():
        conn, _ = server.accept()
        with conn:
            buffer = b""
            while True:
                chunk = conn.recv(4096)
                if not chunk:
                    return
                buffer += chunk
                msg, pos = W.decode_frame(buffer)
                if msg is None:
                    continue
                buffer = buffer[pos:]
                assert isinstance(msg, W.GetRowsRequest)
                conn.sendall(W.encode_frame(response))
                return

    thread = threading.Thread(target=serve)
    thread.start()
    try:
        client = socket.create_connection(("127.0.0.1", port), timeout=5)
        with client:
            request = W.GetRowsRequest(
                count=8, reducer_index=0, committed_row_index=-1,
                mapper_id="live"
            )
            client.sendall(W.encode_frame(request))
            buffer = b""
            msg = None
            while msg is None:
                chunk = client.recv(4096)
                assert chunk, "server closed early"
                buffer += chunk
                msg, _ = W.decode_frame(buffer)
        assert msg == response
        assert R.decode_rowset(msg.attachments[0]) == rowset
    finally:
        thread.join(timeout=5)
        server.close()
