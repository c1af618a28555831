"""Degradation operators: blur, downsampling, masking, phase retrieval.

Every forward model here has the measurement form ``y = A x + n`` with white
Gaussian noise of level ``noise_sigma`` (phase retrieval replaces ``A x`` by
the modulus of the DFT). Linear operators come with their adjoint and a
pseudoinverse; the pseudoinverse is only used to warm-start samplers, so a
regularized inverse is fine where the exact one is unbounded.

Boundary convention is circular everywhere. That choice is load-bearing: it
makes convolution diagonal in the Fourier basis, which the closed-form
frequency-domain proximal step in :mod:`splitlang.proximal` relies on.

Images are ``(C, H, W)`` float32 arrays, values nominally in ``[0, 1]``.
Internal arithmetic is float64; results are cast back to the input's
precision (float32 for image tensors, float64 preserved so iterative solvers
can run exact chains).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from splitlang.errors import InvalidArgument

Tensor = np.ndarray

_LINEAR_KINDS = ("conv", "downsample", "mask", "compose")


def require_image(x: np.ndarray, name: str = "x") -> np.ndarray:
    """Validate a (C,H,W) image tensor and return it as float64."""
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise InvalidArgument(f"{name} must be (C,H,W), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite entries")
    return arr.astype(np.float64, copy=False)


def _as_output(x: np.ndarray, like: np.ndarray) -> Tensor:
    dtype = np.float64 if np.asarray(like).dtype == np.float64 else np.float32
    return np.ascontiguousarray(x, dtype=dtype)


@dataclass(frozen=True)
class ConvKernel:
    """2-D convolution taps with odd extents in both dimensions.

    Blur kernels are normalized to unit sum at construction time by the
    factory functions; the type itself only enforces odd extents and
    finiteness, since lifted kernels in :mod:`splitlang.equiv_hr` reuse it.
    """

    taps: np.ndarray

    def __post_init__(self) -> None:
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2:
            raise InvalidArgument(f"kernel taps must be 2-D, got shape {taps.shape}")
        kh, kw = taps.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise InvalidArgument(f"kernel extents must be odd, got {kh}x{kw}")
        if not np.all(np.isfinite(taps)):
            raise InvalidArgument("kernel taps contain non-finite entries")
        object.__setattr__(self, "taps", taps)

    @property
    def shape(self) -> tuple[int, int]:
        return self.taps.shape  # type: ignore[return-value]

    @property
    def tap_sum(self) -> float:
        return float(self.taps.sum())


def make_gaussian_kernel(size: int, sigma: float) -> ConvKernel:
    """Isotropic Gaussian blur kernel, sampled on an odd grid, unit sum.

    Parameters
    ----------
    size : odd int
        Kernel extent in both dimensions.
    sigma : positive float
        Standard deviation in pixels.
    """
    if size % 2 == 0:
        raise InvalidArgument(f"kernel size must be odd, got {size}")
    if sigma <= 0:
        raise InvalidArgument(f"sigma must be positive, got {sigma}")
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    sq = ax[:, None] ** 2 + ax[None, :] ** 2
    taps = np.exp(-sq / (2.0 * sigma**2))
    return ConvKernel(taps / taps.sum())


def make_motion_kernel(seed: int, size: int, intensity: float) -> ConvKernel:
    """Motion-blur kernel from a seeded random walk.

    The walk takes ``4 * size`` equal-length steps along a heading that
    diffuses as a Gaussian random walk with angular increments of standard
    deviation ``0.35 * intensity`` radians per step, so tortuosity grows with
    intensity and ``intensity == 0`` degenerates to a straight horizontal
    path. Total arc length is ``0.35 * (size - 1)``, the path is re-centered
    on its centroid, and each sample deposits unit mass bilinearly. Taps are
    non-negative and normalized to unit sum. Deterministic for a fixed seed.
    """
    if size % 2 == 0:
        raise InvalidArgument(f"kernel size must be odd, got {size}")
    if not 0.0 <= intensity <= 1.0:
        raise InvalidArgument(f"intensity must lie in [0,1], got {intensity}")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_steps = 4 * size
    arc = 0.35 * (size - 1)
    step = arc / n_steps if n_steps > 0 else 0.0
    theta = 0.0
    pts = np.zeros((n_steps + 1, 2))
    for j in range(n_steps):
        theta += intensity * rng.normal(0.0, 0.35)
        pts[j + 1] = pts[j] + step * np.array([np.cos(theta), np.sin(theta)])
    pts -= pts.mean(axis=0)
    center = size // 2
    taps = np.zeros((size, size), dtype=np.float64)
    for px, py in pts:
        # bilinear deposit; row = y, col = x
        col = px + center
        row = py + center
        r0, c0 = int(np.floor(row)), int(np.floor(col))
        fr, fc = row - r0, col - c0
        for dr, wr in ((0, 1.0 - fr), (1, fr)):
            for dc, wc in ((0, 1.0 - fc), (1, fc)):
                r, c = r0 + dr, c0 + dc
                if 0 <= r < size and 0 <= c < size:
                    taps[r, c] += wr * wc
    total = taps.sum()
    if total <= 0:
        raise InvalidArgument("motion path left the kernel support")
    return ConvKernel(taps / total)


def _kernel_grid(kernel: ConvKernel, shape: tuple[int, int]) -> np.ndarray:
    """Embed centered taps onto the (H,W) periodic grid, center at origin."""
    kh, kw = kernel.shape
    h, w = shape
    if kh > h or kw > w:
        raise InvalidArgument(f"kernel {kh}x{kw} larger than image {h}x{w}")
    grid = np.zeros((h, w), dtype=np.float64)
    grid[:kh, :kw] = kernel.taps
    return np.roll(grid, (-(kh // 2), -(kw // 2)), axis=(0, 1))


def conv_apply(x: Tensor, k: ConvKernel) -> Tensor:
    """Per-channel circular convolution with a centered kernel."""
    arr = require_image(x)
    grid_f = np.fft.fft2(_kernel_grid(k, arr.shape[1:]))
    out = np.fft.ifft2(np.fft.fft2(arr, axes=(1, 2)) * grid_f, axes=(1, 2)).real
    return _as_output(out, x)


def conv_adjoint(y: Tensor, k: ConvKernel) -> Tensor:
    """Adjoint of :func:`conv_apply`: convolution with the flipped kernel."""
    return conv_apply(y, ConvKernel(k.taps[::-1, ::-1].copy()))


def lowpass_mask_1d(n: int, s: int) -> np.ndarray:
    """Spectral window of the ideal (Shannon) anti-aliasing filter.

    Passes frequencies strictly inside the band +-n/(2s) and weights the band
    edge by 1/2 when it falls on a bin, which keeps real inputs real and makes
    the aliases at the fold cancel symmetrically.
    """
    if n % s != 0:
        raise InvalidArgument(f"length {n} not divisible by factor {s}")
    if s == 1:
        return np.ones(n)
    freqs = np.fft.fftfreq(n, d=1.0 / n)  # integer frequencies
    cutoff = n / (2.0 * s)
    mask = np.where(np.abs(freqs) < cutoff, 1.0, 0.0)
    mask[np.abs(np.abs(freqs) - cutoff) < 0.5] = 0.5
    return mask


def _lowpass_mask_2d(shape: tuple[int, int], s: int) -> np.ndarray:
    return np.outer(lowpass_mask_1d(shape[0], s), lowpass_mask_1d(shape[1], s))


def _keys_cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic interpolation kernel (the conventional a = -1/2 variant)."""
    ax = np.abs(x)
    out = np.zeros_like(ax)
    near = ax <= 1.0
    far = (ax > 1.0) & (ax < 2.0)
    out[near] = (a + 2.0) * ax[near] ** 3 - (a + 3.0) * ax[near] ** 2 + 1.0
    out[far] = a * (ax[far] ** 3 - 5.0 * ax[far] ** 2 + 8.0 * ax[far] - 4.0)
    return out


def _bicubic_filter_taps(s: int) -> np.ndarray:
    """1-D anti-aliasing taps for bicubic decimation: K(u/s)/s on odd support."""
    u = np.arange(-(2 * s - 1), 2 * s, dtype=np.float64)
    return _keys_cubic(u / s) / s


def _conv1d_circular(arr: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    if taps.size > n:
        raise InvalidArgument(f"filter of {taps.size} taps larger than axis {n}")
    grid = np.zeros(n, dtype=np.float64)
    grid[: taps.size] = taps
    grid = np.roll(grid, -(taps.size // 2))
    shape = [1] * arr.ndim
    shape[axis] = n
    out = np.fft.ifft(np.fft.fft(arr, axis=axis) * np.fft.fft(grid).reshape(shape), axis=axis)
    return out.real


def _zero_stuff(y: np.ndarray, s: int) -> np.ndarray:
    c, h, w = y.shape
    out = np.zeros((c, h * s, w * s), dtype=np.float64)
    out[:, ::s, ::s] = y
    return out


def downsample_apply(x: Tensor, s: int, mode: str = "avgpool") -> Tensor:
    """Downsample by an integer factor.

    ``avgpool`` takes block means; ``bicubic`` applies the separable Keys
    anti-aliasing filter and decimates; ``shannon`` truncates the spectrum to
    the alias-free band and decimates.
    """
    arr = require_image(x)
    _check_factor(arr.shape, s)
    if s == 1:
        return _as_output(arr, x)
    if mode == "avgpool":
        c, h, w = arr.shape
        blocks = arr.reshape(c, h // s, s, w // s, s)
        return _as_output(blocks.sum(axis=(2, 4)) / float(s * s), x)
    if mode == "bicubic":
        taps = _bicubic_filter_taps(s)
        out = _conv1d_circular(arr, taps, axis=1)
        out = _conv1d_circular(out, taps, axis=2)
        return _as_output(out[:, ::s, ::s], x)
    if mode == "shannon":
        mask = _lowpass_mask_2d(arr.shape[1:], s)
        out = np.fft.ifft2(np.fft.fft2(arr, axes=(1, 2)) * mask, axes=(1, 2)).real
        return _as_output(out[:, ::s, ::s], x)
    raise InvalidArgument(f"unknown downsample mode {mode!r}")


def downsample_adjoint(y: Tensor, s: int, mode: str = "avgpool") -> Tensor:
    arr = require_image(y, "y")
    if s == 1:
        return _as_output(arr, y)
    if mode == "avgpool":
        rep = np.repeat(np.repeat(arr, s, axis=1), s, axis=2)
        return _as_output(rep / float(s * s), y)
    if mode == "bicubic":
        taps = _bicubic_filter_taps(s)  # symmetric, so flip is a no-op
        out = _zero_stuff(arr, s)
        out = _conv1d_circular(out, taps, axis=1)
        out = _conv1d_circular(out, taps, axis=2)
        return _as_output(out, y)
    if mode == "shannon":
        out = _zero_stuff(arr, s)
        mask = _lowpass_mask_2d(out.shape[1:], s)
        out = np.fft.ifft2(np.fft.fft2(out, axes=(1, 2)) * mask, axes=(1, 2)).real
        return _as_output(out, y)
    raise InvalidArgument(f"unknown downsample mode {mode!r}")


def downsample_pseudoinverse(y: Tensor, s: int, mode: str = "avgpool") -> Tensor:
    """Upsampling interpolant matching each mode.

    avgpool: block replication (which already satisfies A A+ = Id on the
    range, since pooling is a mean); bicubic: Keys interpolation of the
    samples; shannon: spectral zero-padding.
    """
    arr = require_image(y, "y")
    if s == 1:
        return _as_output(arr, y)
    if mode == "avgpool":
        return _as_output(np.repeat(np.repeat(arr, s, axis=1), s, axis=2), y)
    if mode == "bicubic":
        up = _zero_stuff(arr, s)
        taps = _keys_cubic(np.arange(-(2 * s - 1), 2 * s, dtype=np.float64) / s)
        up = _conv1d_circular(up, taps, axis=1)
        up = _conv1d_circular(up, taps, axis=2)
        return _as_output(up, y)
    if mode == "shannon":
        # zero-stuffing replicates the spectrum; keeping one replica (band
        # edges at full weight, see lowpass_mask_1d) scaled by s^2 gives the
        # interpolant with A A+ = Id on the range.
        up = _zero_stuff(arr, s)
        h, w = up.shape[1:]
        incl = np.outer(_inclusive_band_1d(h, s), _inclusive_band_1d(w, s))
        out = np.fft.ifft2(np.fft.fft2(up, axes=(1, 2)) * incl * float(s * s), axes=(1, 2)).real
        return _as_output(out, y)
    raise InvalidArgument(f"unknown downsample mode {mode!r}")


def _inclusive_band_1d(n: int, s: int) -> np.ndarray:
    if s == 1:
        return np.ones(n)
    freqs = np.fft.fftfreq(n, d=1.0 / n)
    return np.where(np.abs(freqs) <= n / (2.0 * s) + 0.25, 1.0, 0.0)


def _check_factor(shape: tuple[int, ...], s: int) -> None:
    if s < 1:
        raise InvalidArgument(f"factor must be >= 1, got {s}")
    if shape[-2] % s or shape[-1] % s:
        raise InvalidArgument(f"extents {shape[-2:]} not divisible by factor {s}")


def mask_apply(x: Tensor, m: Tensor) -> Tensor:
    arr = require_image(x)
    mask = _check_mask(m, arr.shape)
    return _as_output(arr * mask, x)


def mask_pseudoinverse(y: Tensor, m: Tensor) -> Tensor:
    """Reinsert observed values; unobserved pixels are zero."""
    return mask_apply(y, m)


def _check_mask(m: np.ndarray, image_shape: tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(m, dtype=np.float64)
    if mask.shape != image_shape[-2:] and mask.shape != image_shape:
        raise InvalidArgument(
            f"mask shape {mask.shape} does not match image shape {image_shape}"
        )
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise InvalidArgument("mask must be binary")
    return mask


def phase_retrieval_apply(x: Tensor) -> Tensor:
    """Modulus of the (unnormalized) 2-D DFT of a single-channel image."""
    arr = require_image(x)
    if arr.shape[0] != 1:
        raise InvalidArgument(f"phase retrieval expects a single channel, got {arr.shape[0]}")
    return _as_output(np.abs(np.fft.fft2(arr[0]))[None], x)


@dataclass(frozen=True, eq=False)
class DegradationOp:
    """A degradation operator with the metadata solvers need.

    ``solver_hint`` names the structure the proximal step can exploit:
    ``freq_diagonal`` (diagonal in the Fourier basis), ``diagonal``
    (pixelwise), ``general_linear`` (matrix-free CG), or ``nonlinear``
    (iterative optimization only). Instances are immutable and safe to share
    across threads.
    """

    kind: str
    noise_sigma: float = 0.01
    kernel: ConvKernel | None = None
    factor: int | None = None
    mode: str | None = None
    mask: np.ndarray | None = None
    children: tuple["DegradationOp", ...] = field(default_factory=tuple)
    solver_hint: str = "general_linear"

    def __post_init__(self) -> None:
        if self.kind not in (*_LINEAR_KINDS, "phase_retrieval"):
            raise InvalidArgument(f"unknown operator kind {self.kind!r}")
        if self.noise_sigma <= 0:
            raise InvalidArgument(f"noise_sigma must be positive, got {self.noise_sigma}")

    @property
    def is_linear(self) -> bool:
        if self.kind == "compose":
            return all(c.is_linear for c in self.children)
        return self.kind in _LINEAR_KINDS


def conv_op(kernel: ConvKernel, noise_sigma: float = 0.01) -> DegradationOp:
    return DegradationOp(
        kind="conv", kernel=kernel, noise_sigma=noise_sigma, solver_hint="freq_diagonal"
    )


def identity_op(noise_sigma: float = 0.01) -> DegradationOp:
    return conv_op(ConvKernel(np.ones((1, 1))), noise_sigma=noise_sigma)


def downsample_op(factor: int, mode: str = "avgpool", noise_sigma: float = 0.01) -> DegradationOp:
    if mode not in ("avgpool", "bicubic", "shannon"):
        raise InvalidArgument(f"unknown downsample mode {mode!r}")
    if factor < 1:
        raise InvalidArgument(f"factor must be >= 1, got {factor}")
    return DegradationOp(
        kind="downsample",
        factor=factor,
        mode=mode,
        noise_sigma=noise_sigma,
        solver_hint="general_linear",
    )


def mask_op(mask: np.ndarray, noise_sigma: float = 0.01) -> DegradationOp:
    m = np.asarray(mask, dtype=np.float64)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise InvalidArgument("mask must be binary")
    return DegradationOp(kind="mask", mask=m, noise_sigma=noise_sigma, solver_hint="diagonal")


def phase_retrieval_op(noise_sigma: float = 0.01) -> DegradationOp:
    return DegradationOp(kind="phase_retrieval", noise_sigma=noise_sigma, solver_hint="nonlinear")


def compose_ops(children: list[DegradationOp] | tuple[DegradationOp, ...],
                noise_sigma: float | None = None) -> DegradationOp:
    """Chain operators; children apply left-to-right (first child first)."""
    kids = tuple(children)
    if not kids:
        raise InvalidArgument("compose needs at least one child operator")
    hint = "nonlinear" if any(not c.is_linear for c in kids) else "general_linear"
    sigma = noise_sigma if noise_sigma is not None else kids[-1].noise_sigma
    return DegradationOp(kind="compose", children=kids, noise_sigma=sigma, solver_hint=hint)


def op_apply(op: DegradationOp, x: Tensor) -> Tensor:
    if op.kind == "conv":
        return conv_apply(x, op.kernel)
    if op.kind == "downsample":
        return downsample_apply(x, op.factor, op.mode)
    if op.kind == "mask":
        return mask_apply(x, op.mask)
    if op.kind == "phase_retrieval":
        return phase_retrieval_apply(x)
    out = x
    for child in op.children:
        out = op_apply(child, out)
    return out


def op_adjoint(op: DegradationOp, y: Tensor) -> Tensor:
    if not op.is_linear:
        raise InvalidArgument("nonlinear operator has no adjoint")
    if op.kind == "conv":
        return conv_adjoint(y, op.kernel)
    if op.kind == "downsample":
        return downsample_adjoint(y, op.factor, op.mode)
    if op.kind == "mask":
        return mask_apply(y, op.mask)
    out = y
    for child in reversed(op.children):
        out = op_adjoint(child, out)
    return out


def op_pseudoinverse(op: DegradationOp, y: Tensor) -> Tensor:
    """Regularized pseudoinverse, used to warm-start samplers."""
    if not op.is_linear:
        raise InvalidArgument("nonlinear operator has no pseudoinverse")
    if op.kind == "conv":
        return _conv_pseudoinverse(y, op.kernel)
    if op.kind == "downsample":
        return downsample_pseudoinverse(y, op.factor, op.mode)
    if op.kind == "mask":
        return mask_pseudoinverse(y, op.mask)
    out = y
    for child in reversed(op.children):
        out = op_pseudoinverse(child, out)
    return out


_PINV_FLOOR = 1e-3


def _conv_pseudoinverse(y: Tensor, kernel: ConvKernel) -> Tensor:
    """Spectral division with a Tikhonov floor on |h| to bound amplification."""
    arr = require_image(y, "y")
    grid_f = np.fft.fft2(_kernel_grid(kernel, arr.shape[1:]))
    denom = np.maximum(np.abs(grid_f) ** 2, _PINV_FLOOR**2)
    out = np.fft.ifft2(np.fft.fft2(arr, axes=(1, 2)) * np.conj(grid_f) / denom, axes=(1, 2)).real
    return _as_output(out, y)
