"""Binary wire protocol for out-of-process prior models.

This file is the normative description of the wire format; external servers
implement it from this text alone. All integers are little-endian.

Frame layout::

    magic   4 bytes  b"LPRO"
    version u8       (= 1)
    opcode  u8
    length  u32      payload byte count
    payload `length` bytes

Request opcodes and payloads::

    0x01 HELLO         (empty)
    0x02 ENCODE        tensor x
    0x03 DECODE        tensor z
    0x04 CONSISTENCY   tensor z_t | t u32 | tensor c
    0x05 GRAD_LOGCOND  tensor z_next | tensor z_prev | t_prev u32 |
                       t_next u32 | tensor c

A successful response echoes the request opcode. Response payloads::

    HELLO          latent shape (ndim u8, dims u32 each) | cond_dim u32 |
                   n_timesteps u32 | timesteps u32 each. n_timesteps == 0
                   advertises an unrestricted timestep set.
    ENCODE / DECODE / CONSISTENCY    tensor
    GRAD_LOGCOND   status u8 (0 = ok, 1 = unsupported) | tensor g when ok
    0x7F ERROR     utf-8 message (any request may be answered this way)

Tensor encoding: ndim u8 (>= 1), each dim u32, then float32 values in
row-major order. Values cross the wire in single precision by design;
callers needing double precision keep it on their side of the boundary.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from splitlang.errors import ProtocolError

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

# Frames larger than this are rejected before allocation.
MAX_PAYLOAD = 1 << 30


# ------------------------------------------------------------------ tensors


def pack_tensor(a: np.ndarray) -> bytes:
    arr = np.asarray(a, dtype="<f4")
    if arr.ndim < 1 or arr.ndim > 255:
        raise ProtocolError(f"tensor rank {arr.ndim} not representable on the wire")
    arr = np.ascontiguousarray(arr)
    parts = [struct.pack("<B", arr.ndim)]
    for dim in arr.shape:
        parts.append(_U32.pack(dim))
    parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def unpack_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor, returning it plus the offset past its last byte."""
    if offset + 1 > len(buf):
        raise ProtocolError("truncated tensor header")
    ndim = buf[offset]
    offset += 1
    if ndim < 1:
        raise ProtocolError("tensor with ndim 0 on the wire")
    if offset + 4 * ndim > len(buf):
        raise ProtocolError("truncated tensor dims")
    dims = []
    for _ in range(ndim):
        dims.append(_U32.unpack_from(buf, offset)[0])
        offset += 4
    count = 1
    for dim in dims:
        count *= dim
    nbytes = count * 4
    if offset + nbytes > len(buf):
        raise ProtocolError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    offset += nbytes
    return arr.reshape(dims).copy(), offset


def pack_u32(value: int) -> bytes:
    return _U32.pack(int(value))


def unpack_u32(buf: bytes, offset: int) -> tuple[int, int]:
    if offset + 4 > len(buf):
        raise ProtocolError("truncated u32 field")
    return _U32.unpack_from(buf, offset)[0], offset + 4


# ------------------------------------------------------------------- frames


def write_frame(wfile, opcode: int, payload: bytes = b"") -> None:
    wfile.write(_HEADER.pack(MAGIC, VERSION, opcode, len(payload)))
    if payload:
        wfile.write(payload)
    wfile.flush()


def _read_exact(rfile, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = rfile.read(n - got)
        if not chunk:
            raise ProtocolError(f"stream closed mid-frame ({got}/{n} bytes)")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(rfile) -> tuple[int, bytes] | None:
    """Read one frame; None on clean EOF at a frame boundary."""
    first = rfile.read(1)
    if not first:
        return None
    header = first + _read_exact(rfile, _HEADER.size - 1)
    magic, version, opcode, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame payload of {length} bytes exceeds limit")
    payload = _read_exact(rfile, length) if length else b""
    return opcode, payload


# ---------------------------------------------------------------- messages


@dataclass(frozen=True)
class HelloInfo:
    latent_shape: tuple[int, ...]
    cond_dim: int
    timesteps: tuple[int, ...]  # empty tuple means unrestricted


def pack_hello(info: HelloInfo) -> bytes:
    parts = [struct.pack("<B", len(info.latent_shape))]
    for dim in info.latent_shape:
        parts.append(_U32.pack(dim))
    parts.append(_U32.pack(info.cond_dim))
    parts.append(_U32.pack(len(info.timesteps)))
    for t in info.timesteps:
        parts.append(_U32.pack(t))
    return b"".join(parts)


def unpack_hello(buf: bytes) -> HelloInfo:
    if len(buf) < 1:
        raise ProtocolError("empty HELLO payload")
    ndim = buf[0]
    offset = 1
    shape = []
    for _ in range(ndim):
        dim, offset = unpack_u32(buf, offset)
        shape.append(dim)
    cond_dim, offset = unpack_u32(buf, offset)
    n_t, offset = unpack_u32(buf, offset)
    steps = []
    for _ in range(n_t):
        t, offset = unpack_u32(buf, offset)
        steps.append(t)
    if offset != len(buf):
        raise ProtocolError("trailing bytes in HELLO payload")
    return HelloInfo(tuple(shape), cond_dim, tuple(steps))


# ------------------------------------------------------------------- client


class PriorClient:
    """Lockstep client: one request in flight on one stream."""

    def __init__(self, rfile, wfile, closer=None):
        self._rfile = rfile
        self._wfile = wfile
        self._closer = closer
        self._lock = threading.Lock()

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 30.0) -> "PriorClient":
        sock = socket.create_connection((host, port), timeout=timeout)
        rfile = sock.makefile("rb")
        wfile = sock.makefile("wb")

        def closer():
            rfile.close()
            wfile.close()
            sock.close()

        return cls(rfile, wfile, closer)

    def request(self, opcode: int, payload: bytes = b"") -> bytes:
        with self._lock:
            write_frame(self._wfile, opcode, payload)
            reply = read_frame(self._rfile)
        if reply is None:
            raise ProtocolError("server closed the connection")
        got_op, got_payload = reply
        if got_op == OP_ERROR:
            raise ProtocolError(got_payload.decode("utf-8", errors="replace"))
        if got_op != opcode:
            raise ProtocolError(f"reply opcode {got_op:#x} does not match request {opcode:#x}")
        return got_payload

    def hello(self) -> HelloInfo:
        return unpack_hello(self.request(OP_HELLO))

    def encode(self, x: np.ndarray) -> np.ndarray:
        out, end = unpack_tensor(self.request(OP_ENCODE, pack_tensor(x)))
        return out

    def decode(self, z: np.ndarray) -> np.ndarray:
        out, end = unpack_tensor(self.request(OP_DECODE, pack_tensor(z)))
        return out

    def consistency(self, z_t: np.ndarray, t: int, c: np.ndarray) -> np.ndarray:
        payload = pack_tensor(z_t) + pack_u32(t) + pack_tensor(c)
        out, end = unpack_tensor(self.request(OP_CONSISTENCY, payload))
        return out

    def grad_logcond(
        self,
        z_next: np.ndarray,
        z_prev: np.ndarray,
        t_prev: int,
        t_next: int,
        c: np.ndarray,
    ) -> np.ndarray | None:
        payload = (
            pack_tensor(z_next)
            + pack_tensor(z_prev)
            + pack_u32(t_prev)
            + pack_u32(t_next)
            + pack_tensor(c)
        )
        reply = self.request(OP_GRAD_LOGCOND, payload)
        if len(reply) < 1:
            raise ProtocolError("empty GRAD_LOGCOND reply")
        status = reply[0]
        if status == GRAD_UNSUPPORTED:
            return None
        if status != GRAD_OK:
            raise ProtocolError(f"unknown GRAD_LOGCOND status {status}")
        out, end = unpack_tensor(reply, 1)
        return out

    def close(self) -> None:
        if self._closer is not None:
            self._closer()
            self._closer = None

    def __enter__(self) -> "PriorClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ------------------------------------------------------------------- server


@dataclass
class EchoBackend:
    """Trivial prior backend that echoes latents; exists for protocol tests.

    ENCODE, DECODE and CONSISTENCY all return their input tensor unchanged,
    so a round trip is bit-exact. Gradients are unsupported, which lets
    clients exercise their finite-difference fallback.
    """

    latent_shape: tuple[int, ...] = (4, 4)
    cond_dim: int = 4
    timesteps: tuple[int, ...] = ()

    def hello(self) -> HelloInfo:
        return HelloInfo(tuple(self.latent_shape), self.cond_dim, tuple(self.timesteps))

    def encode(self, x: np.ndarray) -> np.ndarray:
        return x

    def decode(self, z: np.ndarray) -> np.ndarray:
        return z

    def consistency(self, z_t: np.ndarray, t: int, c: np.ndarray) -> np.ndarray:
        if self.timesteps and t not in self.timesteps:
            raise ProtocolError(f"unsupported timestep {t}")
        return z_t

    def grad_logcond(self, z_next, z_prev, t_prev, t_next, c) -> np.ndarray | None:
        return None


def _handle_request(backend, opcode: int, payload: bytes) -> tuple[int, bytes]:
    if opcode == OP_HELLO:
        return OP_HELLO, pack_hello(backend.hello())
    if opcode == OP_ENCODE:
        x, end = unpack_tensor(payload)
        _expect_end(payload, end)
        return OP_ENCODE, pack_tensor(backend.encode(x))
    if opcode == OP_DECODE:
        z, end = unpack_tensor(payload)
        _expect_end(payload, end)
        return OP_DECODE, pack_tensor(backend.decode(z))
    if opcode == OP_CONSISTENCY:
        z_t, off = unpack_tensor(payload)
        t, off = unpack_u32(payload, off)
        c, off = unpack_tensor(payload, off)
        _expect_end(payload, off)
        return OP_CONSISTENCY, pack_tensor(backend.consistency(z_t, t, c))
    if opcode == OP_GRAD_LOGCOND:
        z_next, off = unpack_tensor(payload)
        z_prev, off = unpack_tensor(payload, off)
        t_prev, off = unpack_u32(payload, off)
        t_next, off = unpack_u32(payload, off)
        c, off = unpack_tensor(payload, off)
        _expect_end(payload, off)
        g = backend.grad_logcond(z_next, z_prev, t_prev, t_next, c)
        if g is None:
            return OP_GRAD_LOGCOND, bytes([GRAD_UNSUPPORTED])
        return OP_GRAD_LOGCOND, bytes([GRAD_OK]) + pack_tensor(g)
    raise ProtocolError(f"unknown opcode {opcode:#x}")


def _expect_end(payload: bytes, offset: int) -> None:
    if offset != len(payload):
        raise ProtocolError("trailing bytes in request payload")


def serve_connection(rfile, wfile, backend) -> None:
    """Answer frames until EOF. Framing errors end the connection; payload
    or handler errors are answered with ERROR frames and service continues."""
    while True:
        try:
            frame = read_frame(rfile)
        except ProtocolError as exc:
            try:
                write_frame(wfile, OP_ERROR, str(exc).encode("utf-8"))
            except OSError:
                pass
            return
        if frame is None:
            return
        opcode, payload = frame
        try:
            reply_op, reply_payload = _handle_request(backend, opcode, payload)
        except ProtocolError as exc:
            write_frame(wfile, OP_ERROR, str(exc).encode("utf-8"))
            continue
        except Exception as exc:  # noqa: BLE001 - surfaced to the peer
            write_frame(wfile, OP_ERROR, f"server error: {exc}".encode("utf-8"))
            continue
        write_frame(wfile, reply_op, reply_payload)


class EchoServer:
    """Threaded TCP wrapper around an EchoBackend, for tests and the CLI."""

    def __init__(self, backend: EchoBackend | None = None, host: str = "127.0.0.1", port: int = 0):
        self.backend = backend if backend is not None else EchoBackend()
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                serve_connection(self.rfile, self.wfile, outer.backend)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> "EchoServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def __enter__(self) -> "EchoServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve_stdio(backend, stdin=None, stdout=None) -> None:
    """Serve one session over stdio pipes (subprocess embedding)."""
    import sys

    rfile = stdin if stdin is not None else sys.stdin.buffer
    wfile = stdout if stdout is not None else sys.stdout.buffer
    serve_connection(rfile, wfile, backend)
