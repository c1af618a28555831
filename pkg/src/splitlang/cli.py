"""Command-line front end.

Every command reads a YAML config where one applies, and a handful of flags
override the common knobs (seed, output directory, prior endpoint, step
count, task) without editing the file.
"""

from __future__ import annotations

import sys

import click
import numpy as np

from splitlang.errors import SplitlangError
from splitlang.harness import (
    ExperimentConfig,
    load_tensor,
    run_experiment,
    save_image,
    save_tensor,
    simulate_measurement,
)


def _apply_overrides(data, seed, out_dir, prior, steps, task):
    if seed is not None:
        data.setdefault("seeds", {"measurement": 0, "sampler": 1})["sampler"] = seed
    if out_dir is not None:
        data["out_dir"] = out_dir
    if steps is not None:
        data.setdefault("sampler", {})["steps"] = int(steps)
    if task is not None:
        data["task"] = task
        data.setdefault("sampler", {})["task"] = task
    if prior is not None:
        if prior == "analytic":
            data["prior"] = {"kind": "analytic"}
        elif prior.startswith("remote:"):
            try:
                _, host, port = prior.split(":")
                data["prior"] = {"kind": "remote", "host": host, "port": int(port)}
            except ValueError:
                raise click.BadParameter("expected remote:HOST:PORT", param_hint="--prior")
        else:
            raise click.BadParameter(
                "expected 'analytic' or 'remote:HOST:PORT'", param_hint="--prior"
            )
    return data


def _common_options(fn):
    fn = click.option("--task", default=None, help="Override the task name.")(fn)
    fn = click.option("--steps", type=click.Choice(["4", "8"]), default=None)(fn)
    fn = click.option("--prior", default=None, help="analytic | remote:HOST:PORT")(fn)
    fn = click.option("--out", "out_dir", default=None, help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Sampler seed.")(fn)
    fn = click.option(
        "--config", "config_path", required=True, type=click.Path(exists=True)
    )(fn)
    return fn


def _load_config(config_path, seed, out_dir, prior, steps, task) -> ExperimentConfig:
    import yaml

    with open(config_path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise click.ClickException(f"{config_path}: config root must be a mapping")
    data = _apply_overrides(data, seed, out_dir, prior, steps, task)
    return ExperimentConfig.from_dict(data)


@click.group()
def main() -> None:
    """Posterior sampling for imaging inverse problems."""


@main.command()
@_common_options
def solve(config_path, seed, out_dir, prior, steps, task):
    """Restore a measurement with the split-step sampler."""
    cfg = _load_config(config_path, seed, out_dir, prior, steps, task)
    try:
        record = run_experiment(cfg)
    except SplitlangError as exc:
        raise click.ClickException(str(exc))
    for key, value in sorted(record.metrics.items()):
        click.echo(f"{key}: {value}")


@main.command(name="solve-pro")
@_common_options
def solve_pro(config_path, seed, out_dir, prior, steps, task):
    """Restore while tuning the conditioning vector on the fly."""
    cfg = _load_config(config_path, seed, out_dir, prior, steps, task)
    if cfg.sapg is None:
        raise click.ClickException("config has no 'sapg' section")
    try:
        record = run_experiment(cfg)
    except SplitlangError as exc:
        raise click.ClickException(str(exc))
    for key, value in sorted(record.metrics.items()):
        click.echo(f"{key}: {value}")
    if record.prompt_history:
        first, last = record.prompt_history[0], record.prompt_history[-1]
        click.echo(f"prompt moved {np.linalg.norm(np.subtract(last, first)):.4g}")


@main.command()
@_common_options
def degrade(config_path, seed, out_dir, prior, steps, task):
    """Simulate a measurement and write it out without solving."""
    cfg = _load_config(config_path, seed, out_dir, prior, steps, task)
    if cfg.out_dir is None:
        raise click.ClickException("degrade needs an output directory (--out)")
    try:
        x_true, op, y, _ = simulate_measurement(cfg)
    except SplitlangError as exc:
        raise click.ClickException(str(exc))
    from pathlib import Path

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "measurement.lten", y)
    save_image(out / "true.png", x_true)
    if y.shape == x_true.shape:
        save_image(out / "degraded.png", np.clip(y, 0.0, 1.0))
    click.echo(f"measurement written to {out / 'measurement.lten'}")


@main.command()
@click.option("--kernel", "kernel_path", required=True, type=click.Path(exists=True),
              help="Coarse kernel, tensor file.")
@click.option("--factor", type=int, required=True)
@click.option("--method", type=click.Choice(["shannon_zero_pad", "bicubic_upsample"]),
              default="shannon_zero_pad")
@click.option("--out", "out_path", default=None, help="Where to write the lifted kernel.")
@click.option("--image", "image_path", default=None, type=click.Path(exists=True),
              help="Optional test image (tensor file) to verify the equivalence on.")
def hrlift(kernel_path, factor, method, out_path, image_path):
    """Lift a low-resolution kernel to the fine grid and optionally verify."""
    from splitlang.equiv_hr import SubsampleOp, lift_kernel, verify_equivalence
    from splitlang.operators import ConvKernel

    try:
        h = ConvKernel(load_tensor(kernel_path).astype(np.float64))
        H = lift_kernel(h, factor, method)
        if out_path is not None:
            save_tensor(out_path, H.taps)
            click.echo(f"lifted kernel {H.shape[0]}x{H.shape[1]} -> {out_path}")
        if image_path is not None:
            x = load_tensor(image_path)
            kind = "shannon" if method == "shannon_zero_pad" else "bicubic"
            err = verify_equivalence(x, h, H, SubsampleOp(factor, kind=kind))
            click.echo(f"equivalence error: {err:.3e}")
    except SplitlangError as exc:
        raise click.ClickException(str(exc))


def _verify_suites(seed: int):
    """Quick self-contained invariant checks; yields (name, passed, detail)."""
    from splitlang import (
        AnalyticGaussianPrior,
        ConvKernel,
        SubsampleOp,
        consistency_apply,
        delta_schedule,
        identity_op,
        lift_kernel,
        make_gaussian_kernel,
        verify_equivalence,
    )
    from splitlang.proximal import ProxRequest, prox_cg, prox_freq
    from splitlang.protocol import EchoBackend, EchoServer, PriorClient
    from splitlang.operators import conv_op

    rng = np.random.default_rng(seed)

    probes = [
        ("gauss_deblur", 1, 0.73, 0.011, 0.4, 0.001592727272727273),
        ("motion_deblur", 5, 0.73, 0.011, 0.4, 0.00015927272727272727),
        ("sr8", 6, 0.73, 0.011, 0.4, 0.2389090909090909),
        ("sr16", 5, 0.73, 0.011, 0.4, 0.35836363636363633),
        ("inpaint", 4, 0.73, 0.011, 0.4, 0.3),
    ]
    bad = [
        p for p in probes if delta_schedule(p[0], p[1], p[2], p[3], p[4]) != p[5]
    ]
    yield "delta-schedule-table", not bad, f"{len(bad)} probe(s) off" if bad else ""

    op = conv_op(make_gaussian_kernel(7, 1.5), noise_sigma=0.05)
    u = rng.random((1, 16, 16))
    y = rng.random((1, 16, 16))
    req = ProxRequest(u=u, y=y, op=op, delta=0.3, sigma_n=0.05)
    xf = prox_freq(req).x
    xc = prox_cg(req, tol=1e-12).x
    err = float(np.linalg.norm(xf - xc) / np.linalg.norm(xc))
    yield "prox-freq-vs-cg", err <= 1e-6, f"rel err {err:.2e}"

    x = rng.random((64, 64))
    h = make_gaussian_kernel(7, 1.8)
    H = lift_kernel(h, 2, "shannon_zero_pad")
    err = verify_equivalence(x, h, H, SubsampleOp(2))
    yield "shannon-equivalence", err <= 1e-5, f"err {err:.2e}"

    prior = AnalyticGaussianPrior((1, 4, 4), np.zeros((16, 1)), 0.5)
    z = rng.standard_normal(16)
    ident = consistency_apply(z, 0, np.zeros(1), prior)
    err = float(np.linalg.norm(ident - z))
    yield "consistency-at-zero", err <= 1e-8, f"err {err:.2e}"

    with EchoServer(EchoBackend()) as server:
        with PriorClient.connect("127.0.0.1", server.port) as client:
            t = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
            back = client.decode(t)
            ok = np.array_equal(back, t)
    yield "protocol-echo-roundtrip", ok, "" if ok else "tensor mangled"


@main.command()
@click.option("--seed", type=int, default=0)
def verify(seed):
    """Run the quick invariant suites and report one line per suite."""
    failures = 0
    for name, passed, detail in _verify_suites(seed):
        status = "PASS" if passed else "FAIL"
        line = f"{status} {name}"
        if detail and not passed:
            line += f" ({detail})"
        click.echo(line)
        failures += 0 if passed else 1
    if failures:
        raise click.exceptions.Exit(1)


@main.command(name="serve-echo")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=0, help="0 picks an ephemeral port.")
@click.option("--stdio", is_flag=True, help="Serve one session on stdin/stdout.")
@click.option("--shape", default="1,4,4", help="Advertised latent shape.")
@click.option("--cond-dim", type=int, default=4)
@click.option("--timesteps", default="", help="Comma list; empty = unrestricted.")
def serve_echo(host, port, stdio, shape, cond_dim, timesteps):
    """Echo prior server for protocol testing; no model involved."""
    from splitlang.protocol import EchoBackend, EchoServer, serve_stdio

    latent_shape = tuple(int(s) for s in shape.split(","))
    ts = tuple(int(t) for t in timesteps.split(",") if t.strip())
    backend = EchoBackend(latent_shape=latent_shape, cond_dim=cond_dim, timesteps=ts)
    if stdio:
        serve_stdio(backend)
        return
    server = EchoServer(backend, host=host, port=port)
    click.echo(str(server.port))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()


if __name__ == "__main__":
    sys.exit(main())
