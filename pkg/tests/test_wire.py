import pytest
from hypothesis import given
from hypothesis import strategies as st

from ros2store.errors import Status
from ros2store.wire import (HEADER_SIZE, MAX_PAYLOAD, Frame, FrameType, MalformedFrame, Reader, Writer,
                            decode_frame, decode_header, encode_frame, encode_header)


def test_header_is_twelve_bytes():
    assert HEADER_SIZE == 12
    raw = encode_header(FrameType.RPC_REQ, 3, 77)
    assert raw[:4] == b"ROS2" and raw[4] == 1 and raw[5] == 0x10
    assert decode_header(raw) == (0x10, 3, 77)


@given(st.sampled_from(list(FrameType)), st.integers(0, 0xFFFF), st.binary(max_size=512))
def test_frame_roundtrip(ftype, flags, payload):
    f = decode_frame(encode_frame(ftype, flags, payload))
    assert f == Frame(int(ftype), flags, payload)


def test_bad_magic_rejected():
    raw = bytearray(encode_frame(FrameType.HELLO, 0, b"x"))
    raw[0:4] = b"XXXX"
    with pytest.raises(MalformedFrame) as ei:
        decode_frame(bytes(raw))
    assert ei.value.status == Status.MALFORMED


def test_bad_version_and_short_header():
    raw = bytearray(encode_header(FrameType.HELLO, 0, 0))
    raw[4] = 9
    with pytest.raises(MalformedFrame):
        decode_header(bytes(raw))
    with pytest.raises(MalformedFrame):
        decode_header(b"ROS2")


def test_oversized_payload_refused():
    with pytest.raises(MalformedFrame):
        encode_header(FrameType.EAGER_DATA, 0, MAX_PAYLOAD + 1)


def test_length_mismatch():
    with pytest.raises(MalformedFrame):
        decode_frame(encode_frame(FrameType.HELLO, 0, b"abc")[:-1])


@given(st.integers(0, 2**64 - 1), st.text(max_size=40), st.binary(max_size=100))
def test_reader_writer_roundtrip(n, s, b):
    raw = Writer().u64(n).text(s).blob(b).u8(7).getvalue()
    r = Reader(raw)
    assert (r.u64(), r.text(), r.blob(), r.u8()) == (n, s, b, 7)
    assert r.remaining() == 0
