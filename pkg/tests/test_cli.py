"""Command-line interface, exercised in-process through click's runner."""

from __future__ import annotations

import threading

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from splitlang.cli import main
from splitlang.harness import load_tensor, save_tensor
from splitlang.operators import make_gaussian_kernel


@pytest.fixture
def runner():
    return CliRunner()


def write_config(path, **over):
    d = {
        "task": "gauss_deblur",
        "operator": {"kind": "conv", "family": "gaussian", "size": 13, "sigma": 3.0},
        "noise_sigma": 0.01,
        "sampler": {"steps": 4, "clamp": True},
        "prior": {"kind": "analytic"},
        "seeds": {"measurement": 7, "sampler": 11},
    }
    d.update(over)
    path.write_text(yaml.safe_dump(d))
    return path


def test_solve_prints_metrics(tmp_path, runner):
    cfg = write_config(tmp_path / "c.yaml")
    result = runner.invoke(main, ["solve", "--config", str(cfg)])
    assert result.exit_code == 0, result.output
    assert "psnr_restored:" in result.output


def test_solve_writes_outputs(tmp_path, runner):
    cfg = write_config(tmp_path / "c.yaml")
    out = tmp_path / "run"
    result = runner.invoke(main, ["solve", "--config", str(cfg), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "record.yaml").exists()
    assert (out / "restored.png").exists()


def test_solve_seed_override_changes_chain(tmp_path, runner):
    cfg = write_config(tmp_path / "c.yaml")
    r1 = runner.invoke(main, ["solve", "--config", str(cfg), "--seed", "1"])
    r2 = runner.invoke(main, ["solve", "--config", str(cfg), "--seed", "2"])
    r1b = runner.invoke(main, ["solve", "--config", str(cfg), "--seed", "1"])
    assert r1.output != r2.output
    assert r1.output == r1b.output


def test_solve_steps_override(tmp_path, runner):
    cfg = write_config(tmp_path / "c.yaml")
    out = tmp_path / "r8"
    result = runner.invoke(
        main, ["solve", "--config", str(cfg), "--steps", "8", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    record = yaml.safe_load((out / "record.yaml").read_text())
    assert len(record["steps"]) == 8


def test_solve_bad_prior_flag(tmp_path, runner):
    cfg = write_config(tmp_path / "c.yaml")
    result = runner.invoke(main, ["solve", "--config", str(cfg), "--prior", "psychic"])
    assert result.exit_code != 0
    assert "analytic" in result.output


def test_solve_pro_requires_sapg(tmp_path, runner):
    cfg = write_config(tmp_path / "c.yaml")
    result = runner.invoke(main, ["solve-pro", "--config", str(cfg)])
    assert result.exit_code != 0
    assert "sapg" in result.output


def test_solve_pro_runs(tmp_path, runner):
    cfg = write_config(
        tmp_path / "c.yaml",
        sampler={"steps": 8, "clamp": True},
        sapg={"m_outer": 2, "n_inner": 4, "final_steps": 8, "radius": 5.0},
        prior={"kind": "analytic", "cond_dim": 2},
    )
    result = runner.invoke(main, ["solve-pro", "--config", str(cfg)])
    assert result.exit_code == 0, result.output
    assert "psnr_restored:" in result.output


def test_degrade_writes_measurement(tmp_path, runner):
    cfg = write_config(tmp_path / "c.yaml")
    out = tmp_path / "meas"
    result = runner.invoke(main, ["degrade", "--config", str(cfg), "--out", str(out)])
    assert result.exit_code == 0, result.output
    y = load_tensor(out / "measurement.lten")
    assert y.shape == (1, 64, 64)
    assert (out / "degraded.png").exists()


def test_hrlift_lifts_and_verifies(tmp_path, runner):
    kpath = tmp_path / "k.lten"
    save_tensor(kpath, make_gaussian_kernel(7, 1.5).taps.astype(np.float32))
    ipath = tmp_path / "x.lten"
    save_tensor(ipath, np.random.default_rng(0).random((64, 64)).astype(np.float32))
    out = tmp_path / "H.lten"
    result = runner.invoke(
        main,
        ["hrlift", "--kernel", str(kpath), "--factor", "2", "--out", str(out),
         "--image", str(ipath)],
    )
    assert result.exit_code == 0, result.output
    H = load_tensor(out)
    assert H.shape == (13, 13)
    err = float(result.output.split("equivalence error:")[1])
    assert err <= 1e-5


def test_verify_all_pass(runner):
    result = runner.invoke(main, ["verify"])
    assert result.exit_code == 0, result.output
    lines = [l for l in result.output.strip().splitlines() if l]
    assert len(lines) >= 5
    assert all(l.startswith("PASS") for l in lines)


def test_serve_echo_stdio_handshake(tmp_path):
    # run the stdio server against an in-process client over pipes
    import subprocess
    import sys

    from splitlang.protocol import (
        MAGIC,
        OP_HELLO,
        VERSION,
        read_frame,
        unpack_hello,
        write_frame,
    )

    proc = subprocess.Popen(
        [sys.executable, "-m", "splitlang.cli", "serve-echo", "--stdio",
         "--shape", "1,2,2", "--cond-dim", "3"],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
    )
    try:
        write_frame(proc.stdin, OP_HELLO, b"")
        proc.stdin.flush()
        opcode, payload = read_frame(proc.stdout)
        assert opcode == OP_HELLO
        info = unpack_hello(payload)
        assert info.latent_shape == (1, 2, 2)
        assert info.cond_dim == 3
    finally:
        proc.stdin.close()
        proc.wait(timeout=10)
