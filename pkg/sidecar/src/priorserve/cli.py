"""Command line entry points."""

from __future__ import annotations

import logging
import sys

import click

from priorserve.model import build_model
from priorserve.server import ConfigError, ServerConfig
from priorserve import server as _server


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise click.BadParameter("expected CxHxW, e.g. 4x8x8", param_hint="--latent")
    try:
        return tuple(int(p) for p in parts)  # type: ignore[return-value]
    except ValueError:
        raise click.BadParameter(f"non-integer dimension in '{text}'", param_hint="--latent")


def _parse_steps(text: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise click.BadParameter(f"non-integer timestep in '{text}'", param_hint="--timesteps")


@click.group()
def main():
    """Serve a latent consistency prior over the binary wire protocol."""


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=0, show_default=True, help="0 picks a free port.")
@click.option("--stdio", is_flag=True, help="Serve one session on stdin/stdout.")
@click.option("--model", "model_name", default="procedural", show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--latent", default="4x8x8", show_default=True, help="Latent shape CxHxW.")
@click.option("--cond-dim", default=16, show_default=True)
@click.option("--timesteps", default="", help="Comma-separated advertised set; empty means unrestricted.")
@click.option("--timeout", default=30.0, show_default=True, help="Per-request deadline in seconds.")
@click.option("--verbose", "-v", is_flag=True)
def serve(host, port, stdio, model_name, device, latent, cond_dim, timesteps, timeout, verbose):
    """Run the server until killed (TCP) or until peer EOF (--stdio)."""
    # Logs go to stderr: in stdio mode stdout IS the wire.
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        cfg = ServerConfig(
            host=host,
            port=port,
            stdio=stdio,
            model=model_name,
            device=device,
            latent_shape=_parse_shape(latent),
            cond_dim=cond_dim,
            timesteps=_parse_steps(timesteps),
            timeout=timeout,
        )
        _server.serve(cfg)
    except (ConfigError, ValueError) as exc:
        raise click.ClickException(str(exc))
    except KeyboardInterrupt:
        pass


@main.command()
@click.argument("text")
@click.option("--model", "model_name", default="procedural", show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--latent", default="4x8x8", show_default=True, help="Latent shape CxHxW.")
@click.option("--cond-dim", default=16, show_default=True)
def embed(text, model_name, device, latent, cond_dim):
    """Print the conditioning vector for a prompt, one value per line.

    The output feeds the solver's conditioning input and serves as the
    starting point for prompt tuning. An empty TEXT gives the model's
    null-prompt embedding.
    """
    try:
        model = build_model(model_name, _parse_shape(latent), cond_dim, device)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    for value in model.embed_prompt(text):
        click.echo(f"{value:.17g}")


if __name__ == "__main__":
    main()
