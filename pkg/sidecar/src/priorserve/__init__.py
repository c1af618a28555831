"""Sidecar serving a latent consistency prior over the binary wire protocol.

The solver engine stays in its own process and talks to this one through
framed HELLO/ENCODE/DECODE/CONSISTENCY requests; gradient requests are
answered "unsupported" so clients fall back to finite differences.
"""

from priorserve.model import MODELS, ProceduralLatentModel, build_model
from priorserve.server import (
    ConfigError,
    PriorServer,
    ServerConfig,
    serve,
    serve_stdio,
)
from priorserve.wire import FramingError, WireError

__all__ = [
    "MODELS",
    "ProceduralLatentModel",
    "build_model",
    "ConfigError",
    "PriorServer",
    "ServerConfig",
    "serve",
    "serve_stdio",
    "FramingError",
    "WireError",
]
