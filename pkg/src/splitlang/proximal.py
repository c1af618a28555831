"""Proximal data-fidelity steps.

All paths compute (or approximate) the proximal map of the scaled data term

    prox(u) = argmin_x  delta * ||y - A x||^2 / (2 sigma_n^2) + ||x - u||^2 / 2,

whose minimizer solves the normal equations
``(delta A^T A + sigma_n^2 I) x = delta A^T y + sigma_n^2 u``. For circular
convolution the system is diagonal in the Fourier basis and solved exactly
per frequency bin; for masks it is diagonal in the pixel basis; general
linear operators go through matrix-free conjugate gradients; nonlinear
operators are handled by adaptive-moment gradient descent.

delta = 0 is the prox of the zero function and returns u for every path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splitlang.errors import InvalidArgument, SplitlangError
from splitlang.operators import (
    DegradationOp,
    Tensor,
    _kernel_grid,
    op_adjoint,
    op_apply,
    require_image,
)


@dataclass(frozen=True)
class ProxRequest:
    """One proximal evaluation: anchor u, measurement y, operator, step."""

    u: Tensor
    y: Tensor
    op: DegradationOp
    delta: float
    sigma_n: float

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise InvalidArgument(f"delta must be >= 0, got {self.delta}")
        if self.sigma_n <= 0:
            raise InvalidArgument(f"sigma_n must be positive, got {self.sigma_n}")


@dataclass(frozen=True)
class ProxResult:
    """Solver output. ``converged`` is a warning flag, never an exception."""

    x: Tensor
    converged: bool = True
    residual: float | None = None
    iterations: int | None = None
    objective: float | None = None


def prox_objective(req: ProxRequest, x: Tensor) -> float:
    """delta * ||y - A x||^2 / (2 sigma_n^2) + ||x - u||^2 / 2."""
    ax = np.asarray(op_apply(req.op, x), dtype=np.float64)
    y = np.asarray(req.y, dtype=np.float64)
    u = np.asarray(req.u, dtype=np.float64)
    data = float(np.sum((y - ax) ** 2)) * req.delta / (2.0 * req.sigma_n**2)
    return data + 0.5 * float(np.sum((np.asarray(x, dtype=np.float64) - u) ** 2))


def prox_freq(req: ProxRequest) -> ProxResult:
    """Exact prox for circular convolution, solved per frequency bin."""
    if req.op.solver_hint != "freq_diagonal":
        raise InvalidArgument(f"prox_freq needs a freq_diagonal operator, got {req.op.solver_hint!r}")
    u = require_image(req.u, "u")
    y = require_image(req.y, "y")
    if req.delta == 0.0:
        return ProxResult(x=_like(u, req.u))
    h_f = np.fft.fft2(_kernel_grid(req.op.kernel, u.shape[1:]))
    u_f = np.fft.fft2(u, axes=(1, 2))
    y_f = np.fft.fft2(y, axes=(1, 2))
    s2 = req.sigma_n**2
    x_f = (req.delta * np.conj(h_f) * y_f + s2 * u_f) / (req.delta * np.abs(h_f) ** 2 + s2)
    return ProxResult(x=_like(np.fft.ifft2(x_f, axes=(1, 2)).real, req.u))


def prox_diag(req: ProxRequest) -> ProxResult:
    """Exact prox for masking: blend on observed pixels, u elsewhere."""
    if req.op.kind != "mask":
        raise InvalidArgument(f"prox_diag needs a mask operator, got kind {req.op.kind!r}")
    u = require_image(req.u, "u")
    y = require_image(req.y, "y")
    if req.delta == 0.0:
        return ProxResult(x=_like(u, req.u))
    m = req.op.mask
    s2 = req.sigma_n**2
    blend = (req.delta * y + s2 * u) / (req.delta + s2)
    return ProxResult(x=_like(np.where(m > 0, blend, u), req.u))


def prox_cg(req: ProxRequest, tol: float = 1e-8, max_iter: int = 500) -> ProxResult:
    """Matrix-free conjugate gradients on the normal equations.

    Runs in float64 regardless of input dtype. Non-convergence within
    ``max_iter`` is reported through ``converged=False`` with the achieved
    relative residual; the iterate is still returned.
    """
    if not req.op.is_linear:
        raise InvalidArgument("prox_cg requires a linear operator")
    u = require_image(req.u, "u")
    y = require_image(req.y, "y")
    if req.delta == 0.0:
        return ProxResult(x=_like(u, req.u), converged=True, residual=0.0, iterations=0)
    s2 = req.sigma_n**2

    def system(v: np.ndarray) -> np.ndarray:
        av = op_apply(req.op, v)
        return req.delta * np.asarray(op_adjoint(req.op, av), dtype=np.float64) + s2 * v

    b = req.delta * np.asarray(op_adjoint(req.op, y), dtype=np.float64) + s2 * u
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return ProxResult(x=_like(np.zeros_like(u), req.u), converged=True, residual=0.0, iterations=0)
    x = u.copy()
    r = b - system(x)
    p = r.copy()
    rs = float(np.vdot(r, r).real)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if np.sqrt(rs) / b_norm <= tol:
            iterations -= 1
            break
        ap = system(p)
        alpha = rs / float(np.vdot(p, ap).real)
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(np.vdot(r, r).real)
        p = r + (rs_new / rs) * p
        rs = rs_new
    residual = float(np.sqrt(rs) / b_norm)
    return ProxResult(
        x=_like(x, req.u),
        converged=residual <= tol,
        residual=residual,
        iterations=iterations,
    )


def prox_nonlinear(
    req: ProxRequest,
    iters: int = 300,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
) -> ProxResult:
    """Adaptive-moment gradient descent on the prox objective, from u.

    Works for any operator exposing apply plus a residual-Jacobian adjoint;
    this is the only path available for phase retrieval.
    """
    u = require_image(req.u, "u")
    y = np.asarray(req.y, dtype=np.float64)
    if req.delta == 0.0:
        return ProxResult(x=_like(u, req.u), converged=True, objective=0.0, iterations=0)
    x = u.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    eps = 1e-8
    scale = req.delta / req.sigma_n**2
    for it in range(1, iters + 1):
        with np.errstate(invalid="ignore", over="ignore"):
            residual = np.asarray(op_apply(req.op, x), dtype=np.float64) - y
            grad = scale * _residual_jacobian_adjoint(req.op, x, residual) + (x - u)
        if not np.all(np.isfinite(grad)):
            raise SplitlangError(f"non-finite gradient in prox_nonlinear at iteration {it}")
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad**2
        m_hat = m / (1.0 - beta1**it)
        v_hat = v / (1.0 - beta2**it)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
    objective = prox_objective(req, x)
    if not np.isfinite(objective):
        raise SplitlangError("non-finite objective in prox_nonlinear")
    return ProxResult(x=_like(x, req.u), converged=True, objective=objective, iterations=iters)


def prox_apply(req: ProxRequest, tol: float = 1e-8, max_iter: int = 500) -> ProxResult:
    """Dispatch on the operator's solver hint."""
    hint = req.op.solver_hint
    if hint == "freq_diagonal":
        return prox_freq(req)
    if hint == "diagonal":
        return prox_diag(req)
    if hint == "general_linear":
        return prox_cg(req, tol=tol, max_iter=max_iter)
    if hint == "nonlinear":
        return prox_nonlinear(req)
    raise InvalidArgument(f"unknown solver hint {hint!r}")


def _residual_jacobian_adjoint(op: DegradationOp, x: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """J(x)^T r for the measurement map; the gradient core of the data term."""
    if op.is_linear:
        return np.asarray(op_adjoint(op, residual), dtype=np.float64)
    if op.kind == "phase_retrieval":
        spectrum = np.fft.fft2(x[0])
        mag = np.abs(spectrum)
        # subgradient 0 at zero-modulus bins: the modulus is nonsmooth there
        phase = np.where(mag > 0, spectrum / np.where(mag > 0, mag, 1.0), 0.0)
        h, w = x.shape[1:]
        return np.fft.ifft2(residual[0] * phase).real[None] * (h * w)
    raise InvalidArgument(f"no gradient available for operator kind {op.kind!r}")


def _like(x: np.ndarray, ref: np.ndarray) -> Tensor:
    dtype = np.float64 if np.asarray(ref).dtype == np.float64 else np.float32
    return np.ascontiguousarray(x, dtype=dtype)
