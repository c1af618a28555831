"""Codec interop: this package's wire implementation against the client's.

Both sides encode the same documented format independently; these tests pin
byte-for-byte agreement so socket tests can attribute failures to transport
logic rather than serialization.
"""

import numpy as np
import pytest
from splitlang import protocol

from priorserve import wire


def _sample_arrays():
    rng = np.random.default_rng(7)
    return [
        np.arange(6.0).reshape(2, 3),
        rng.standard_normal((1, 4, 4)),
        rng.standard_normal(5)[::2],  # non-contiguous view
        np.array([3.25], dtype=np.float32),
        rng.standard_normal((2, 1, 3, 2)).astype(np.float32),
    ]


def test_tensor_bytes_match_reference():
    for a in _sample_arrays():
        assert wire.pack_tensor(a) == protocol.pack_tensor(a)


def test_tensor_cross_unpack():
    for a in _sample_arrays():
        want = np.asarray(a, dtype="<f4")
        got, end = wire.unpack_tensor(protocol.pack_tensor(a))
        assert end == len(protocol.pack_tensor(a))
        assert np.array_equal(got, want)
        got, end = protocol.unpack_tensor(wire.pack_tensor(a))
        assert np.array_equal(got, want)


def test_tensor_truncations_rejected():
    buf = wire.pack_tensor(np.ones((2, 2)))
    with pytest.raises(wire.WireError):
        wire.unpack_tensor(buf[:0])
    with pytest.raises(wire.WireError):
        wire.unpack_tensor(buf[:3])  # inside the dims
    with pytest.raises(wire.WireError):
        wire.unpack_tensor(buf[:-1])
    with pytest.raises(wire.WireError):
        wire.unpack_tensor(b"\x00")
    with pytest.raises(wire.WireError):
        wire.expect_end(buf + b"junk", len(buf))


def test_hello_bytes_match_reference():
    info = protocol.HelloInfo((4, 8, 8), 16, (40, 999))
    ours = wire.pack_hello((4, 8, 8), 16, (40, 999))
    assert ours == protocol.pack_hello(info)
    assert protocol.unpack_hello(ours) == info
    unrestricted = wire.pack_hello((1, 6, 6), 3, ())
    assert protocol.unpack_hello(unrestricted).timesteps == ()


def test_frame_header_validation():
    frame = wire.pack_frame(wire.OP_HELLO, b"abc")
    opcode, length = wire.parse_header(frame[: wire.HEADER_SIZE])
    assert (opcode, length) == (wire.OP_HELLO, 3)
    assert frame[wire.HEADER_SIZE :] == b"abc"

    with pytest.raises(wire.FramingError, match="magic"):
        wire.parse_header(b"XPRO" + frame[4 : wire.HEADER_SIZE])
    bad_version = bytearray(frame[: wire.HEADER_SIZE])
    bad_version[4] = 9
    with pytest.raises(wire.FramingError, match="version"):
        wire.parse_header(bytes(bad_version))
    oversize = bytearray(frame[: wire.HEADER_SIZE])
    oversize[6:10] = (wire.MAX_PAYLOAD + 1).to_bytes(4, "little")
    with pytest.raises(wire.FramingError, match="exceeds"):
        wire.parse_header(bytes(oversize))
