"""Connection handling: lockstep request loop over TCP or stdio.

One worker thread per connection, one request in flight per connection.
Framing violations (bad magic, wrong version, oversized or half-delivered
frames, request deadlines) are logged, answered with a best-effort ERROR
frame, and the connection is dropped; payload-level problems (malformed
tensors, unknown opcodes, wrong shapes, unsupported timesteps) are answered
with ERROR frames and the connection keeps serving.

The request deadline starts at a request's first byte, so idle connections
may sit unbounded between requests while a stalled or slow request cannot
hold its worker past ``ServerConfig.timeout`` seconds. Stdio mode serves the
parent process over pipes and applies no deadline.
"""

from __future__ import annotations

import logging
import socketserver
import sys
import threading
import time
from dataclasses import dataclass

from priorserve import wire
from priorserve.model import build_model

log = logging.getLogger("priorserve")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 0
    stdio: bool = False
    model: str = "procedural"
    device: str = "cpu"
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    cond_dim: int = 16
    timesteps: tuple[int, ...] = ()  # empty advertises an unrestricted set
    timeout: float = 30.0

    def __post_init__(self):
        if not 0 <= self.port <= 65535:
            raise ConfigError(f"port {self.port} outside [0, 65535]")
        if not self.timeout > 0:
            raise ConfigError(f"timeout must be positive, got {self.timeout}")
        steps = tuple(int(t) for t in self.timesteps)
        if any(t < 0 for t in steps):
            raise ConfigError("timesteps must be >= 0")
        if len(set(steps)) != len(steps):
            raise ConfigError("timesteps must be distinct")
        object.__setattr__(self, "timesteps", tuple(sorted(steps)))
        object.__setattr__(self, "latent_shape", tuple(int(d) for d in self.latent_shape))


def _prepare(cfg: ServerConfig):
    model = build_model(cfg.model, cfg.latent_shape, cfg.cond_dim, cfg.device)
    for t in cfg.timesteps:
        if t > model.T:
            raise ConfigError(f"advertised timestep {t} beyond model horizon {model.T}")
    return model


# --------------------------------------------------------------- transports


class _SocketTransport:
    def __init__(self, sock, timeout: float):
        self._sock = sock
        self._timeout = timeout
        self._deadline = 0.0

    def wait_request(self) -> bytes | None:
        self._sock.settimeout(None)
        first = self._sock.recv(1)
        if not first:
            return None
        self._deadline = time.monotonic() + self._timeout
        return first

    def read_exact(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            remaining = self._deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(f"request exceeded {self._timeout:g}s deadline")
            self._sock.settimeout(remaining)
            try:
                chunk = self._sock.recv(min(n - got, 1 << 20))
            except TimeoutError:
                raise TimeoutError(
                    f"request exceeded {self._timeout:g}s deadline"
                ) from None
            if not chunk:
                raise wire.FramingError(f"stream closed mid-frame ({got}/{n} bytes)")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def write(self, data: bytes) -> None:
        self._sock.settimeout(self._timeout)
        self._sock.sendall(data)


class _FileTransport:
    def __init__(self, rfile, wfile):
        self._rfile = rfile
        self._wfile = wfile

    def wait_request(self) -> bytes | None:
        first = self._rfile.read(1)
        return first if first else None

    def read_exact(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            chunk = self._rfile.read(n - got)
            if not chunk:
                raise wire.FramingError(f"stream closed mid-frame ({got}/{n} bytes)")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def write(self, data: bytes) -> None:
        self._wfile.write(data)
        self._wfile.flush()


# ----------------------------------------------------------------- dispatch


def _dispatch(model, advertised: tuple[int, ...], opcode: int, payload: bytes) -> tuple[int, bytes]:
    if opcode == wire.OP_HELLO:
        # Request payload is ignored, matching the reference server.
        hello = wire.pack_hello(tuple(model.latent_shape), model.cond_dim, advertised)
        return wire.OP_HELLO, hello
    if opcode == wire.OP_ENCODE:
        x, end = wire.unpack_tensor(payload)
        wire.expect_end(payload, end)
        return wire.OP_ENCODE, wire.pack_tensor(model.encode(x))
    if opcode == wire.OP_DECODE:
        z, end = wire.unpack_tensor(payload)
        wire.expect_end(payload, end)
        return wire.OP_DECODE, wire.pack_tensor(model.decode(z))
    if opcode == wire.OP_CONSISTENCY:
        z_t, off = wire.unpack_tensor(payload)
        t, off = wire.unpack_u32(payload, off)
        c, off = wire.unpack_tensor(payload, off)
        wire.expect_end(payload, off)
        if advertised and t not in advertised:
            raise wire.WireError(f"unsupported timestep {t}")
        return wire.OP_CONSISTENCY, wire.pack_tensor(model.consistency(z_t, t, c))
    if opcode == wire.OP_GRAD_LOGCOND:
        _, off = wire.unpack_tensor(payload)
        _, off = wire.unpack_tensor(payload, off)
        _, off = wire.unpack_u32(payload, off)
        _, off = wire.unpack_u32(payload, off)
        _, off = wire.unpack_tensor(payload, off)
        wire.expect_end(payload, off)
        return wire.OP_GRAD_LOGCOND, bytes([wire.GRAD_UNSUPPORTED])
    raise wire.WireError(f"unknown opcode {opcode:#x}")


def _serve_connection(transport, model, advertised: tuple[int, ...]) -> None:
    while True:
        try:
            first = transport.wait_request()
        except OSError:
            return
        if first is None:
            return
        try:
            header = first + transport.read_exact(wire.HEADER_SIZE - 1)
            opcode, length = wire.parse_header(header)
            payload = transport.read_exact(length) if length else b""
        except (wire.FramingError, TimeoutError) as exc:
            log.warning("resetting connection: %s", exc)
            try:
                transport.write(wire.pack_frame(wire.OP_ERROR, str(exc).encode("utf-8")))
            except (OSError, TimeoutError):
                pass
            return
        except OSError:
            return
        try:
            reply_op, reply_payload = _dispatch(model, advertised, opcode, payload)
        except (wire.WireError, ValueError) as exc:
            reply_op, reply_payload = wire.OP_ERROR, str(exc).encode("utf-8")
        except Exception as exc:  # noqa: BLE001 - surfaced to the peer
            log.warning("request failed: %s", exc)
            reply_op, reply_payload = wire.OP_ERROR, f"server error: {exc}".encode("utf-8")
        try:
            transport.write(wire.pack_frame(reply_op, reply_payload))
        except (OSError, TimeoutError):
            return


# -------------------------------------------------------------------- server


class PriorServer:
    """Threaded TCP server; one worker per connection."""

    def __init__(self, cfg: ServerConfig | None = None):
        self.cfg = cfg if cfg is not None else ServerConfig()
        self.model = _prepare(self.cfg)
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                transport = _SocketTransport(self.request, outer.cfg.timeout)
                _serve_connection(transport, outer.model, outer.cfg.timesteps)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((self.cfg.host, self.cfg.port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> "PriorServer":
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

    def __enter__(self) -> "PriorServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve_stdio(cfg: ServerConfig, stdin=None, stdout=None) -> None:
    """Serve one session over pipes; returns when the peer closes its end."""
    model = _prepare(cfg)
    rfile = stdin if stdin is not None else sys.stdin.buffer
    wfile = stdout if stdout is not None else sys.stdout.buffer
    _serve_connection(_FileTransport(rfile, wfile), model, cfg.timesteps)


def serve(cfg: ServerConfig) -> None:
    """Run until killed (TCP) or peer EOF (stdio)."""
    if cfg.stdio:
        serve_stdio(cfg)
        return
    server = PriorServer(cfg)
    host, port = server.address
    log.info(
        "listening on %s:%d (model %s, latent %s, cond_dim %d)",
        host, port, cfg.model, server.model.latent_shape, server.model.cond_dim,
    )
    server.serve_forever()
