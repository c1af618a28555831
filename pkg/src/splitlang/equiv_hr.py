"""Resolution lifting: when does low-res convolution commute with subsampling?

A subsampling operator S_s first applies an anti-aliasing filter, then keeps
every s-th sample. Given a kernel h acting on the coarse grid, we construct a
fine-grid kernel H so that

    conv(S_s(X), h) == S_s(conv(X, H))

for every image X. Writing the decimation in the Fourier domain, the coarse
spectrum at bin k is the average of the fine spectrum over the s^2 bins that
alias onto k. A kernel H whose spectrum takes the same value h_hat(k) on all
of those bins factors out of the aliasing sum, which makes the identity hold
exactly, for any anti-aliasing filter. Zero-insertion upsampling (taps of h
placed on the multiples of s) has exactly that replicated spectrum, so the
lift is grid-free and the identity is exact to round-off. Bicubic
interpolation of the taps is a cheap smooth alternative; its spectrum only
approximates the replication near the band, so the identity holds to about
1e-2 for ordinary blur kernels.

Everything here uses the periodic (circular) boundary model, matching the
convolution convention of :mod:`splitlang.operators`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splitlang.errors import InvalidArgument
from splitlang.operators import (
    ConvKernel,
    _bicubic_filter_taps,
    _check_factor,
    _conv1d_circular,
    _keys_cubic,
    conv_apply,
    downsample_apply,
    lowpass_mask_1d,
)

SUBSAMPLE_KINDS = ("shannon", "smooth_spectral", "bicubic")
LIFT_METHODS = ("shannon_zero_pad", "bicubic_upsample")
COMPOSE_MODES = ("avgpool",) + SUBSAMPLE_KINDS


@dataclass(frozen=True)
class SubsampleOp:
    """Alias-free subsampling by an integer factor.

    ``shannon`` truncates the spectrum to the alias-free band (ideal filter),
    ``smooth_spectral`` tapers it with a raised cosine whose rolloff stays
    inside the band, and ``bicubic`` filters with separable Keys taps (not
    band-limited, kept for comparison with common resize implementations).
    For the bicubic kind the filter taps are stored on the instance; the two
    spectral kinds expose their window through :meth:`spectral_window`.
    """

    factor: int
    kind: str = "shannon"
    rolloff: float = 0.25
    taps: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.factor < 1:
            raise InvalidArgument(f"factor must be >= 1, got {self.factor}")
        if self.kind not in SUBSAMPLE_KINDS:
            raise InvalidArgument(f"unknown subsample kind {self.kind!r}")
        if not 0.0 < self.rolloff <= 1.0:
            raise InvalidArgument(f"rolloff must lie in (0, 1], got {self.rolloff}")
        taps = _bicubic_filter_taps(self.factor) if self.kind == "bicubic" else None
        object.__setattr__(self, "taps", taps)

    def spectral_window(self, n: int) -> np.ndarray:
        """Per-axis frequency response on an n-point grid (fft bin order)."""
        if n % self.factor != 0:
            raise InvalidArgument(f"length {n} not divisible by factor {self.factor}")
        if self.kind == "shannon":
            return lowpass_mask_1d(n, self.factor)
        if self.kind == "smooth_spectral":
            return _raised_cosine_window(n, self.factor, self.rolloff)
        grid = np.zeros(n)
        grid[: self.taps.size] = self.taps
        return np.fft.fft(np.roll(grid, -(self.taps.size // 2))).real


def _raised_cosine_window(n: int, s: int, rolloff: float) -> np.ndarray:
    if s == 1:
        return np.ones(n)
    omega = np.abs(np.fft.fftfreq(n)) * 2.0 * np.pi  # in [0, pi]
    edge = np.pi / s
    flat = (1.0 - rolloff) * edge
    win = np.zeros(n)
    win[omega <= flat] = 1.0
    ramp = (omega > flat) & (omega < edge)
    win[ramp] = 0.5 * (1.0 + np.cos(np.pi * (omega[ramp] - flat) / (edge - flat)))
    return win


def _ensure_3d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim == 3:
        return arr, False
    raise InvalidArgument(f"image must be 2-D or (C,H,W), got shape {arr.shape}")


def alias_free_downsample(x: np.ndarray, op: SubsampleOp) -> np.ndarray:
    """Filter with the op's anti-aliasing filter, then keep every s-th sample."""
    arr, squeeze = _ensure_3d(x)
    s = op.factor
    _check_factor(arr.shape, s)
    if s == 1:
        out = arr.copy()
    elif op.kind == "smooth_spectral":
        mask = np.outer(
            op.spectral_window(arr.shape[1]), op.spectral_window(arr.shape[2])
        )
        out = np.fft.ifft2(np.fft.fft2(arr, axes=(1, 2)) * mask, axes=(1, 2)).real
        out = out[:, ::s, ::s]
    else:
        out = downsample_apply(arr, s, mode=op.kind)
    return out[0] if squeeze else out


def lift_kernel(h: ConvKernel, s: int, method: str = "shannon_zero_pad") -> ConvKernel:
    """Fine-grid kernel equivalent (or approximately so) to h under S_s."""
    if s < 1:
        raise InvalidArgument(f"factor must be >= 1, got {s}")
    if method not in LIFT_METHODS:
        raise InvalidArgument(f"unknown lift method {method!r}")
    if s == 1:
        return ConvKernel(h.taps.copy())
    kh, kw = h.shape
    comb = np.zeros(((kh - 1) * s + 1, (kw - 1) * s + 1), dtype=np.float64)
    comb[::s, ::s] = h.taps
    if method == "shannon_zero_pad":
        return ConvKernel(comb)
    # interpolate the comb with the Keys cubic; 1/s per axis keeps the DC
    # gain equal to h's, which the equivalence condition requires
    taps_1d = _keys_cubic(np.arange(-(2 * s - 1), 2 * s, dtype=np.float64) / s) / s
    out = np.apply_along_axis(np.convolve, 0, comb, taps_1d, mode="full")
    out = np.apply_along_axis(np.convolve, 1, out, taps_1d, mode="full")
    return ConvKernel(out)


def verify_equivalence(
    x: np.ndarray, h: ConvKernel, H: ConvKernel, sub: SubsampleOp
) -> float:
    """Max-abs relative discrepancy between conv(S_s(x), h) and S_s(conv(x, H))."""
    arr, _ = _ensure_3d(x)
    lhs = conv_apply(alias_free_downsample(arr, sub), h)
    rhs = alias_free_downsample(conv_apply(arr, H), sub)
    scale = max(float(np.abs(lhs).max()), float(np.abs(rhs).max()), 1e-30)
    return float(np.abs(lhs - rhs).max()) / scale


def _subsample(x: np.ndarray, s: int, mode: str) -> np.ndarray:
    if mode == "avgpool":
        return downsample_apply(x, s, mode="avgpool")
    return alias_free_downsample(x, SubsampleOp(s, kind=mode))


def compose_check(x: np.ndarray, a: int, b: int, mode: str = "avgpool") -> float:
    """Max-abs discrepancy between S_{ab}(x) and S_a(S_b(x))."""
    if a < 1 or b < 1:
        raise InvalidArgument(f"factors must be >= 1, got {a}, {b}")
    if mode not in COMPOSE_MODES:
        raise InvalidArgument(f"unknown compose mode {mode!r}")
    arr, _ = _ensure_3d(x)  # float64 up front so both paths share arithmetic
    _check_factor(arr.shape, a * b)
    joint = _subsample(arr, a * b, mode)
    nested = _subsample(_subsample(arr, b, mode), a, mode)
    return float(np.abs(joint - nested).max())
