"""Experiment plumbing: metrics, image/tensor files, config, and the runner.

Configs are plain YAML trees of strings, numbers, and lists; the dataclass
here round-trips them losslessly so a stored run can be replayed from its
record alone. Measurement simulation and the sampler draw from two separate
seeds, which keeps "same observation, different chain" experiments cheap.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError

from splitlang.errors import FileFormatError, InvalidArgument, SplitlangError
from splitlang.operators import (
    DegradationOp,
    conv_op,
    downsample_op,
    identity_op,
    make_gaussian_kernel,
    make_motion_kernel,
    mask_op,
    op_apply,
    op_pseudoinverse,
)
from splitlang.protocol import ProtocolError, pack_tensor, unpack_tensor
from splitlang.sae import AnalyticGaussianPrior, RemotePrior, analytic_posterior
from splitlang.sampler import LatinoConfig, default_timesteps, latino_run
from splitlang.sapg import SapgConfig, latino_pro_run

TENSOR_MAGIC = b"LTEN"
TENSOR_VERSION = 1


# ------------------------------------------------------------------ metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1]-scaled images, capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    for name, arr in (("a", a), ("b", b)):
        if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
            raise InvalidArgument(f"{name} has values outside [0, 1]")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 1e-10:
        return 100.0
    return min(100.0, float(-10.0 * np.log10(mse)))


# ------------------------------------------------------------------- images


def save_image(path: str | Path, x: np.ndarray) -> None:
    """Write a (1,H,W) or (3,H,W) [0,1] tensor as an 8-bit PNG.

    Quantization rounds half up so the mapping is deterministic across
    platforms (banker's rounding is not).
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise InvalidArgument(f"expected (1,H,W) or (3,H,W), got {arr.shape}")
    q = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if q.shape[0] == 1:
        img = Image.fromarray(q[0], mode="L")
    else:
        img = Image.fromarray(np.moveaxis(q, 0, 2), mode="RGB")
    img.save(Path(path), format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG into a float32 (C,H,W) tensor in [0,1]."""
    try:
        with Image.open(Path(path)) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise FileFormatError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(np.moveaxis(arr, 2, 0))


# ------------------------------------------------------------------ tensors


def save_tensor(path: str | Path, x: np.ndarray) -> None:
    """Write a float32 tensor: magic "LTEN", version, rank, dims u32 LE, data."""
    arr = np.asarray(x)
    if arr.ndim == 0:
        raise InvalidArgument("0-dim tensors are not supported")
    blob = TENSOR_MAGIC + bytes([TENSOR_VERSION]) + pack_tensor(arr)
    Path(path).write_bytes(blob)


def load_tensor(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 5:
        raise FileFormatError(f"truncated payload in {path}")
    if buf[:4] != TENSOR_MAGIC:
        raise FileFormatError(f"{path} is not a tensor file (bad magic)")
    if buf[4] != TENSOR_VERSION:
        raise FileFormatError(f"unsupported tensor file version {buf[4]}")
    try:
        arr, offset = unpack_tensor(buf, 5)
    except ProtocolError as exc:
        if "truncated" in str(exc):
            raise FileFormatError(f"truncated payload in {path}") from exc
        raise FileFormatError(str(exc)) from exc
    if offset != len(buf):
        raise FileFormatError(f"trailing bytes in {path}")
    return arr


# --------------------------------------------------------------- demo image


def demo_image(size: int = 64) -> np.ndarray:
    """Procedural grayscale test image: wavy background plus sharp shapes.

    The background period sits in the band a moderate blur attenuates but
    does not null, so restoration quality is visible in PSNR, not just in
    the eyeballed output.
    """
    i = np.arange(size, dtype=np.float64)
    yy, xx = i[:, None], i[None, :]
    period = 0.375 * size
    base = 0.5 + 0.3 * np.sin(2 * np.pi * yy / period) * np.cos(2 * np.pi * xx / period)
    base += 0.1 * (xx + yy) / (2 * size)
    disk = (yy - 0.3 * size) ** 2 + (xx - 0.62 * size) ** 2 < (0.14 * size) ** 2
    base[disk] += 0.3
    r0, r1 = int(0.62 * size), int(0.74 * size)
    c0, c1 = int(0.12 * size), int(0.5 * size)
    base[r0:r1, c0:c1] = 0.12
    base[int(0.15 * size) : int(0.2 * size), int(0.1 * size) : int(0.9 * size)] = 0.88
    return np.clip(base, 0.05, 0.95).astype(np.float32)[None]


# ------------------------------------------------------------------- config

_TOP_KEYS = {
    "task",
    "image",
    "operator",
    "noise_sigma",
    "measurement",
    "prior",
    "sampler",
    "sapg",
    "conjugate_check",
    "seeds",
    "out_dir",
}


@dataclass
class ExperimentConfig:
    """Everything one run needs; nested sections stay plain dicts."""

    task: str
    operator: dict[str, Any]
    noise_sigma: float
    sampler: dict[str, Any]
    prior: dict[str, Any] = field(default_factory=lambda: {"kind": "analytic"})
    image: str = "demo"
    measurement: str | None = None
    sapg: dict[str, Any] | None = None
    conjugate_check: dict[str, Any] | None = None
    seeds: dict[str, int] = field(default_factory=lambda: {"measurement": 0, "sampler": 1})
    out_dir: str | None = None

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise InvalidArgument("noise_sigma must be positive")
        for key in ("measurement", "sampler"):
            if key not in self.seeds:
                raise InvalidArgument(f"seeds must contain {key!r}")
        if "kind" not in self.operator:
            raise InvalidArgument("operator section needs a 'kind'")
        if self.prior.get("kind", "analytic") not in ("analytic", "remote"):
            raise InvalidArgument(f"unknown prior kind {self.prior.get('kind')!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        missing = {"task", "operator", "noise_sigma", "sampler"} - set(d)
        if missing:
            raise InvalidArgument(f"missing config keys: {sorted(missing)}")
        return cls(**d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise FileFormatError(f"config is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise FileFormatError("config root must be a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())


# --------------------------------------------------------------- run record


@dataclass
class RunRecord:
    """Self-contained result of one run; replayable from `config` alone."""

    config: dict[str, Any]
    metrics: dict[str, Any]
    steps: list[dict[str, Any]]
    prompt_history: list[list[float]] | None
    stage_seconds: dict[str, float]
    created_at: str

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        data = yaml.safe_load(Path(path).read_text())
        if not isinstance(data, dict):
            raise FileFormatError("run record root must be a mapping")
        return cls(**data)

    def comparable(self) -> dict[str, Any]:
        """Everything except wall-clock fields, for determinism checks."""
        d = self.to_dict()
        d.pop("created_at")
        d.pop("stage_seconds")
        return d


class StageError(SplitlangError):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- builders


def _build_operator(cfg: ExperimentConfig) -> DegradationOp:
    spec = cfg.operator
    kind = spec["kind"]
    sigma_n = float(cfg.noise_sigma)
    if kind == "identity":
        return identity_op(noise_sigma=sigma_n)
    if kind == "conv":
        family = spec.get("family", "gaussian")
        if family == "gaussian":
            kernel = make_gaussian_kernel(int(spec.get("size", 13)), float(spec.get("sigma", 3.0)))
        elif family == "motion":
            kernel = make_motion_kernel(
                int(spec.get("seed", 0)), int(spec.get("size", 13)),
                float(spec.get("intensity", 0.5)),
            )
        else:
            raise InvalidArgument(f"unknown conv family {family!r}")
        return conv_op(kernel, noise_sigma=sigma_n)
    if kind == "downsample":
        return downsample_op(
            int(spec.get("factor", 8)), mode=spec.get("mode", "avgpool"), noise_sigma=sigma_n
        )
    if kind == "mask":
        density = float(spec.get("density", 0.5))
        shape = tuple(spec.get("shape", (1, 64, 64)))
        mask_rng = np.random.default_rng(int(spec.get("seed", 0)))
        mask = (mask_rng.random(shape) < density).astype(np.float64)
        return mask_op(mask, noise_sigma=sigma_n)
    raise InvalidArgument(f"unknown operator kind {kind!r}")


def _build_prior(cfg: ExperimentConfig, shape: tuple[int, int, int]):
    spec = cfg.prior
    kind = spec.get("kind", "analytic")
    if kind == "analytic":
        return AnalyticGaussianPrior.smoothness(
            shape,
            scale=float(spec.get("scale", 0.05)),
            corner=float(spec.get("corner", 2.0)),
            power=float(spec.get("power", 2.0)),
            offset_value=float(spec.get("offset", 0.5)),
            cond_dim=int(spec.get("cond_dim", 1)),
        )
    return RemotePrior.connect(spec["host"], int(spec["port"]))


def _build_latino_cfg(cfg: ExperimentConfig, seed: int) -> LatinoConfig:
    spec = cfg.sampler
    steps = int(spec.get("steps", 8))
    timesteps = spec.get("timesteps")
    if timesteps is None:
        timesteps = default_timesteps(steps)
    overrides = spec.get("delta_overrides")
    return LatinoConfig(
        n_steps=steps,
        timesteps=tuple(int(t) for t in timesteps),
        task=spec.get("task", cfg.task),
        delta_overrides=None if overrides is None else tuple(float(d) for d in overrides),
        seed=seed,
        clamp=bool(spec.get("clamp", True)),
    )


def _stage(label: str, fn, clocks: dict[str, float]):
    start = time.perf_counter()
    try:
        result = fn()
    except Exception as exc:
        raise StageError(label, exc) from exc
    clocks[label] = time.perf_counter() - start
    return result


# ------------------------------------------------------------------- runner


def simulate_measurement(cfg: ExperimentConfig):
    """Stages shared by `degrade` and the full runner: image, operator, y."""
    clocks: dict[str, float] = {}

    def _load():
        if cfg.image == "demo":
            return demo_image()
        if cfg.image.startswith("demo:"):
            return demo_image(int(cfg.image.split(":", 1)[1]))
        return load_image(cfg.image)

    x_true = _stage("image", _load, clocks)
    op = _stage("operator", lambda: _build_operator(cfg), clocks)

    def _measure():
        if cfg.measurement is not None:
            return load_tensor(cfg.measurement).astype(np.float64)
        rng = np.random.default_rng(cfg.seeds["measurement"])
        clean = op_apply(op, x_true.astype(np.float64))
        return clean + cfg.noise_sigma * rng.standard_normal(clean.shape)

    y = _stage("measure", _measure, clocks)
    return x_true, op, y, clocks


def _degraded_view(op: DegradationOp, y: np.ndarray, shape) -> np.ndarray:
    """The observation mapped back to image space for eyeballing/PSNR."""
    if y.shape == shape:
        return np.clip(y, 0.0, 1.0)
    return np.clip(op_pseudoinverse(op, y), 0.0, 1.0)


def _conjugate_report(cfg, prior, op, y, trace_cfg, c, rng) -> dict[str, float]:
    spec = cfg.conjugate_check
    n_chains = int(spec.get("chains", 200))
    mean_x, var_x = analytic_posterior(prior, op, y, c)
    acc = np.zeros_like(mean_x)
    acc2 = np.zeros_like(mean_x)
    for _ in range(n_chains):
        x, _ = latino_run(y, op, prior, c, trace_cfg, rng)
        acc += x
        acc2 += x**2
    emp_mean = acc / n_chains
    emp_var = np.maximum(acc2 / n_chains - emp_mean**2, 0.0)
    denom = float(np.linalg.norm(mean_x))
    return {
        "chains": n_chains,
        "mean_rel_err": float(np.linalg.norm(emp_mean - mean_x)) / max(denom, 1e-30),
        "var_rel_err": float(
            np.linalg.norm(emp_var - var_x) / max(np.linalg.norm(var_x), 1e-30)
        ),
    }


def run_experiment(cfg: ExperimentConfig) -> RunRecord:
    """Degrade (or load) a measurement, solve, score, and optionally persist."""
    x_true, op, y, clocks = simulate_measurement(cfg)
    prior = _stage("prior", lambda: _build_prior(cfg, x_true.shape), clocks)
    latino_cfg = _build_latino_cfg(cfg, cfg.seeds["sampler"])

    prompt_history = None
    if cfg.sapg is not None:
        spec = dict(cfg.sapg)
        c0 = np.asarray(spec.pop("c0", [0.0] * prior.cond_dim), dtype=np.float64)
        sapg_cfg = SapgConfig(seed=cfg.seeds["sampler"], **spec)
        inner = LatinoConfig(
            n_steps=sapg_cfg.n_inner,
            timesteps=tuple(default_timesteps(sapg_cfg.n_inner)),
            task=latino_cfg.task,
            delta_overrides=None,
            seed=latino_cfg.seed,
            clamp=latino_cfg.clamp,
        )

        def _solve():
            return latino_pro_run(y, op, prior, c0, sapg_cfg, inner)

        x_hat, state, traces = _stage("solve", _solve, clocks)
        trace = traces[-1]
        prompt_history = [list(map(float, h)) for h in state.history]
    else:
        c = np.zeros(prior.cond_dim)
        rng = np.random.default_rng(cfg.seeds["sampler"])
        x_hat, trace = _stage(
            "solve", lambda: latino_run(y, op, prior, c, latino_cfg, rng), clocks
        )

    def _metrics():
        out: dict[str, Any] = {
            "final_residual": float(trace.steps[-1].residual),
        }
        restored = np.clip(x_hat, 0.0, 1.0)
        degraded = _degraded_view(op, y, x_true.shape)
        out["psnr_degraded"] = psnr(degraded, x_true)
        out["psnr_restored"] = psnr(restored, x_true)
        return out

    metrics = _stage("metrics", _metrics, clocks)

    if cfg.conjugate_check is not None:
        rng = np.random.default_rng(cfg.seeds["sampler"] + 1)
        c = np.zeros(prior.cond_dim)
        metrics["conjugate_report"] = _stage(
            "conjugate-check",
            lambda: _conjugate_report(cfg, prior, op, y, latino_cfg, c, rng),
            clocks,
        )

    record = RunRecord(
        config=cfg.to_dict(),
        metrics=metrics,
        steps=[
            {
                "t": int(s.t),
                "delta": float(s.delta),
                "residual": float(s.residual),
                "objective": float(s.objective),
            }
            for s in trace.steps
        ],
        prompt_history=prompt_history,
        stage_seconds=clocks,
        created_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )

    if cfg.out_dir is not None:
        def _persist():
            out = Path(cfg.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            record.save(out / "record.yaml")
            save_tensor(out / "restored.lten", x_hat)
            save_image(out / "restored.png", np.clip(x_hat, 0.0, 1.0))
            save_tensor(out / "measurement.lten", y)
            save_image(out / "true.png", x_true)
            save_image(out / "degraded.png", _degraded_view(op, y, x_true.shape))

        _stage("persist", _persist, clocks)
    return record
