"""Server-side codec for the prior wire protocol.

Implemented from the normative format description (the client library's
protocol module): frames are ``b"LPRO" | version u8 | opcode u8 |
length u32 | payload``, all integers little-endian, tensors encoded as
``ndim u8 | dims u32 each | float32 row-major``. This file shares no code
with the client; interoperability is covered by the conformance tests.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"LPRO"
VERSION = 1

OP_HELLO = 0x01
OP_ENCODE = 0x02
OP_DECODE = 0x03
OP_CONSISTENCY = 0x04
OP_GRAD_LOGCOND = 0x05
OP_ERROR = 0x7F

GRAD_OK = 0
GRAD_UNSUPPORTED = 1

_HEADER = struct.Struct("<4sBBI")
_U32 = struct.Struct("<I")

# Refuse to allocate for absurd frames.
MAX_PAYLOAD = 1 << 30


class WireError(Exception):
    """Peer-visible request problem; the message travels in an ERROR frame."""


class FramingError(WireError):
    """Stream-level violation; the connection cannot be trusted afterwards."""


def pack_tensor(a: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(np.asarray(a, dtype="<f4"))
    if arr.ndim < 1 or arr.ndim > 255:
        raise WireError(f"tensor rank {arr.ndim} not representable on the wire")
    parts = [struct.pack("<B", arr.ndim)]
    for dim in arr.shape:
        parts.append(_U32.pack(dim))
    parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def unpack_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if offset + 1 > len(buf):
        raise WireError("truncated tensor header")
    ndim = buf[offset]
    offset += 1
    if ndim < 1:
        raise WireError("tensor with ndim 0 on the wire")
    if offset + 4 * ndim > len(buf):
        raise WireError("truncated tensor dims")
    dims = []
    for _ in range(ndim):
        dims.append(_U32.unpack_from(buf, offset)[0])
        offset += 4
    count = 1
    for dim in dims:
        count *= dim
    nbytes = count * 4
    if offset + nbytes > len(buf):
        raise WireError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return arr.reshape(dims).copy(), offset + nbytes


def unpack_u32(buf: bytes, offset: int) -> tuple[int, int]:
    if offset + 4 > len(buf):
        raise WireError("truncated u32 field")
    return _U32.unpack_from(buf, offset)[0], offset + 4


def expect_end(buf: bytes, offset: int) -> None:
    if offset != len(buf):
        raise WireError("trailing bytes in request payload")


def pack_hello(latent_shape: tuple[int, ...], cond_dim: int, timesteps: tuple[int, ...]) -> bytes:
    parts = [struct.pack("<B", len(latent_shape))]
    for dim in latent_shape:
        parts.append(_U32.pack(dim))
    parts.append(_U32.pack(cond_dim))
    parts.append(_U32.pack(len(timesteps)))
    for t in timesteps:
        parts.append(_U32.pack(t))
    return b"".join(parts)


def pack_frame(opcode: int, payload: bytes = b"") -> bytes:
    return _HEADER.pack(MAGIC, VERSION, opcode, len(payload)) + payload


def parse_header(header: bytes) -> tuple[int, int]:
    """Validate a raw 10-byte header, returning (opcode, payload length)."""
    magic, version, opcode, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FramingError(f"unsupported protocol version {version}")
    if length > MAX_PAYLOAD:
        raise FramingError(f"frame payload of {length} bytes exceeds limit")
    return opcode, length


HEADER_SIZE = _HEADER.size
