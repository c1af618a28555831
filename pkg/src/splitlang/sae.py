"""Stochastic auto-encoder: noise schedule, priors, and the prior half-step.

The sampler's prior move is decode(consistency(encode_stochastic(x))). Two
backends satisfy the same handle contract:

* AnalyticGaussianPrior: latents are orthonormal 2-D DCT coefficients and
  z | c ~ N(Wc, diag(s)), so the consistency map (the probability-flow
  transport from time t to 0) has a closed form and every sampler property
  can be checked against exact Gaussian algebra.
* RemotePrior: a protocol client for an external neural model.

Latents are 1-D float64 arrays for the analytic prior and server-shaped
arrays for remote priors; the sampler treats them opaquely.
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from splitlang import protocol
from splitlang.errors import InvalidArgument, ProtocolError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.T < 1:
            raise InvalidArgument("schedule needs T >= 1")
        if beta.shape != (self.T,):
            raise InvalidArgument(f"beta must have shape ({self.T},), got {beta.shape}")
        if ab.shape != (self.T + 1,):
            raise InvalidArgument(f"alpha_bar must have shape ({self.T + 1},), got {ab.shape}")
        if not (np.all(beta > 0) and np.all(beta < 1)):
            raise InvalidArgument("beta values must lie in (0, 1)")
        if ab[0] != 1.0:
            raise InvalidArgument("alpha_bar[0] must equal 1")
        if not np.all(np.diff(ab) < 0):
            raise InvalidArgument("alpha_bar must be strictly decreasing")
        expected = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        if not np.allclose(ab, expected, rtol=1e-12, atol=0):
            raise InvalidArgument("alpha_bar is not the cumulative product of (1 - beta)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", ab)


def make_schedule(kind: str, T: int = 1000) -> NoiseSchedule:
    if kind != "linear_ddpm":
        raise InvalidArgument(f"unknown schedule kind '{kind}'")
    if T < 1:
        raise InvalidArgument("schedule needs T >= 1")
    beta = np.linspace(1e-4, 2e-2, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def _check_t(schedule: NoiseSchedule, t: int, lo: int = 0) -> int:
    t = int(t)
    if t < lo or t > schedule.T:
        raise InvalidArgument(f"timestep {t} outside [{lo}, {schedule.T}]")
    return t


# ----------------------------------------------------------- analytic prior


class AnalyticGaussianPrior:
    """Conditional Gaussian in an orthonormal spectral basis.

    decode(z) = b + Q^T z with Q rows taken from the orthonormal 2-D DCT of
    each channel (optionally a subset, giving d < n); encode(x) = Q(x - b).
    The latent law is z | c ~ N(Wc, diag(s)).
    """

    kind = "analytic"

    def __init__(
        self,
        shape: tuple[int, int, int],
        cond_map: np.ndarray,
        latent_vars,
        offset: np.ndarray | None = None,
        schedule: NoiseSchedule | None = None,
        keep: np.ndarray | None = None,
    ):
        if len(shape) != 3:
            raise InvalidArgument("ambient shape must be (C, H, W)")
        self.shape = tuple(int(v) for v in shape)
        n = int(np.prod(self.shape))
        if keep is not None:
            keep = np.asarray(keep, dtype=np.intp).ravel()
            if keep.size == 0 or np.unique(keep).size != keep.size:
                raise InvalidArgument("keep must be a non-empty set of unique indices")
            if keep.min() < 0 or keep.max() >= n:
                raise InvalidArgument("keep indices out of range")
        self._keep = keep
        self.d = n if keep is None else int(keep.size)

        s = np.asarray(latent_vars, dtype=np.float64)
        if s.ndim == 0:
            s = np.full(self.d, float(s))
        if s.shape != (self.d,):
            raise InvalidArgument(f"latent_vars must be scalar or shape ({self.d},)")
        if not np.all(s > 0):
            raise InvalidArgument("latent variances must be positive")
        self.s = s

        W = np.asarray(cond_map, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != self.d:
            raise InvalidArgument(f"cond_map must have shape ({self.d}, cond_dim)")
        self.W = W
        self.cond_dim = W.shape[1]

        if offset is None:
            offset = np.zeros(self.shape, dtype=np.float64)
        offset = np.asarray(offset, dtype=np.float64)
        if offset.shape != self.shape:
            raise InvalidArgument(f"offset shape {offset.shape} != ambient {self.shape}")
        self.b = offset

        self.schedule = schedule if schedule is not None else make_schedule("linear_ddpm", 1000)
        self.latent_shape = (self.d,)

        rng = np.random.Generator(np.random.PCG64(0))
        for _ in range(3):
            z = rng.standard_normal(self.d)
            back = self.encode(self.decode(z))
            if np.linalg.norm(back - z) > 1e-6 * max(np.linalg.norm(z), 1.0):
                raise InvalidArgument("basis failed the orthonormal round-trip check")

    @classmethod
    def smoothness(
        cls,
        shape: tuple[int, int, int],
        scale: float = 0.05,
        corner: float = 2.0,
        power: float = 2.0,
        offset_value: float = 0.5,
        cond_dim: int = 1,
        schedule: NoiseSchedule | None = None,
    ) -> "AnalyticGaussianPrior":
        """Unconditional smoothness prior: variance decays with frequency."""
        c, h, w = shape
        fy = np.arange(h, dtype=np.float64)[:, None]
        fx = np.arange(w, dtype=np.float64)[None, :]
        radius = np.sqrt(fy**2 + fx**2)
        var2d = scale / (1.0 + (radius / corner) ** power)
        s = np.tile(var2d.ravel(), c)
        W = np.zeros((s.size, cond_dim))
        b = np.full(shape, offset_value, dtype=np.float64)
        return cls(shape, W, s, offset=b, schedule=schedule)

    # -- basis application

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise InvalidArgument(f"expected ambient shape {self.shape}, got {x.shape}")
        co = sfft.dctn(x - self.b, type=2, norm="ortho", axes=(1, 2)).ravel()
        return co if self._keep is None else co[self._keep]

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.d,):
            raise InvalidArgument(f"expected latent shape ({self.d},), got {z.shape}")
        if self._keep is None:
            co = z
        else:
            co = np.zeros(int(np.prod(self.shape)))
            co[self._keep] = z
        co = co.reshape(self.shape)
        return self.b + sfft.idctn(co, type=2, norm="ortho", axes=(1, 2))

    # -- conditional structure

    def cond_mean(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        if c.shape != (self.cond_dim,):
            raise InvalidArgument(f"conditioning vector must have shape ({self.cond_dim},)")
        return self.W @ c

    def _ratio(self, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bar[t]
        return np.sqrt(self.s) / np.sqrt(ab * self.s + 1.0 - ab)

    def consistency(self, z_t: np.ndarray, t: int, c: np.ndarray) -> np.ndarray:
        t = _check_t(self.schedule, t)
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != (self.d,):
            raise InvalidArgument(f"expected latent shape ({self.d},), got {z_t.shape}")
        w = self.cond_mean(c)
        ab = self.schedule.alpha_bar[t]
        return w + self._ratio(t) * (z_t - np.sqrt(ab) * w)

    def grad_logcond(self, z_next, z_prev, t_prev: int, t_next: int, c) -> np.ndarray:
        t_prev = _check_t(self.schedule, t_prev)
        t_next = _check_t(self.schedule, t_next, lo=1)
        z_next = np.asarray(z_next, dtype=np.float64)
        ab_n = self.schedule.alpha_bar[t_next]
        ab_p = self.schedule.alpha_bar[t_prev]
        g_prev = self.consistency(z_prev, t_prev, c)
        e = z_next - np.sqrt(ab_n) * g_prev
        coeff = 1.0 - self._ratio(t_prev) * np.sqrt(ab_p)
        return np.sqrt(ab_n) / (1.0 - ab_n) * (self.W.T @ (coeff * e))

    def score_x(self, x: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Ambient-space prior score; only the modeled subspace contributes."""
        g_lat = (self.encode(x) - self.cond_mean(c)) / self.s
        return -(self.decode(g_lat) - self.b)

    def sample(self, c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = self.cond_mean(c) + np.sqrt(self.s) * rng.standard_normal(self.d)
        return self.decode(z)

    def supports_t(self, t: int) -> bool:
        return 0 <= int(t) <= self.schedule.T


def analytic_posterior(
    prior: AnalyticGaussianPrior,
    op,
    y: np.ndarray,
    c: np.ndarray,
    max_dim: int = 600,
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form Gaussian posterior mean and marginal variances in x-space.

    Builds the dense d-column map A Q^T by basis probing, so it is meant for
    verification at small d, not production use.
    """
    from splitlang.operators import op_apply

    if prior.d > max_dim:
        raise InvalidArgument(f"posterior helper limited to d <= {max_dim}")
    y = np.asarray(y, dtype=np.float64)
    n_out = y.size
    n_amb = int(np.prod(prior.shape))
    Qt = np.empty((n_amb, prior.d))
    M = np.empty((n_out, prior.d))
    for i in range(prior.d):
        e = np.zeros(prior.d)
        e[i] = 1.0
        col = prior.decode(e) - prior.b
        Qt[:, i] = col.ravel()
        M[:, i] = np.asarray(op_apply(op, col), dtype=np.float64).ravel()
    sigma2 = float(op.noise_sigma) ** 2
    w = prior.cond_mean(c)
    P = M.T @ M / sigma2 + np.diag(1.0 / prior.s)
    rhs = M.T @ (y - np.asarray(op_apply(op, prior.b), dtype=np.float64)).ravel() / sigma2
    rhs = rhs + w / prior.s
    cov_z = np.linalg.inv(P)
    mean_z = cov_z @ rhs
    mean_x = prior.b + (Qt @ mean_z).reshape(prior.shape)
    var_x = np.einsum("ij,jk,ik->i", Qt, cov_z, Qt).reshape(prior.shape)
    return mean_x, var_x


# ------------------------------------------------------------- remote prior


class RemotePrior:
    """Protocol client satisfying the prior-handle contract.

    Owns one connection and is single-user; concurrent chains each open
    their own. Latents take the server-advertised shape.
    """

    kind = "remote"

    def __init__(self, client: protocol.PriorClient, schedule: NoiseSchedule | None = None):
        self._client = client
        self.schedule = schedule if schedule is not None else make_schedule("linear_ddpm", 1000)
        info = client.hello()
        self.latent_shape = info.latent_shape
        self.cond_dim = info.cond_dim
        self.timesteps = frozenset(info.timesteps) if info.timesteps else None
        self._proc: subprocess.Popen | None = None

    @classmethod
    def connect(cls, host: str, port: int, schedule: NoiseSchedule | None = None) -> "RemotePrior":
        return cls(protocol.PriorClient.connect(host, port), schedule)

    @classmethod
    def spawn(cls, cmd: list[str], schedule: NoiseSchedule | None = None) -> "RemotePrior":
        proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        client = protocol.PriorClient(proc.stdout, proc.stdin, closer=None)
        handle = cls(client, schedule)
        handle._proc = proc
        return handle

    def encode(self, x: np.ndarray) -> np.ndarray:
        z = self._client.encode(x)
        if z.shape != self.latent_shape:
            raise ProtocolError(
                f"server returned latent shape {z.shape}, advertised {self.latent_shape}"
            )
        return np.asarray(z, dtype=np.float64)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(self._client.decode(z), dtype=np.float64)

    def consistency(self, z_t: np.ndarray, t: int, c: np.ndarray) -> np.ndarray:
        out = self._client.consistency(z_t, int(t), c)
        if out.shape != self.latent_shape:
            raise ProtocolError(
                f"server returned latent shape {out.shape}, advertised {self.latent_shape}"
            )
        return np.asarray(out, dtype=np.float64)

    def grad_logcond(self, z_next, z_prev, t_prev, t_next, c) -> np.ndarray | None:
        g = self._client.grad_logcond(z_next, z_prev, int(t_prev), int(t_next), c)
        return None if g is None else np.asarray(g, dtype=np.float64)

    def supports_t(self, t: int) -> bool:
        t = int(t)
        if self.timesteps is not None:
            return t in self.timesteps
        return 0 <= t <= self.schedule.T

    def autoencoding_error(self, z: np.ndarray) -> float:
        """Measured || z - encode(decode(z)) ||; reported, never corrected."""
        z = np.asarray(z, dtype=np.float64)
        return float(np.linalg.norm(z - self.encode(self.decode(z))))

    def close(self) -> None:
        self._client.close()
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None

    def __enter__(self) -> "RemotePrior":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --------------------------------------------------------------- operations


def encode_stochastic(x: np.ndarray, t: int, prior, rng: np.random.Generator) -> np.ndarray:
    t = _check_t(prior.schedule, t)
    ab = prior.schedule.alpha_bar[t]
    z = np.sqrt(ab) * prior.encode(x)
    if t > 0:
        z = z + np.sqrt(1.0 - ab) * rng.standard_normal(z.shape)
    return z


def consistency_apply(z_t: np.ndarray, t: int, c: np.ndarray, prior) -> np.ndarray:
    t = int(t)
    if not prior.supports_t(t):
        if prior.kind == "remote":
            raise ProtocolError(f"timestep {t} not in the server-advertised set")
        raise InvalidArgument(f"timestep {t} unsupported by this prior")
    return prior.consistency(z_t, t, c)


def sae_step(x: np.ndarray, t: int, c: np.ndarray, prior, rng: np.random.Generator) -> np.ndarray:
    z_t = encode_stochastic(x, t, prior, rng)
    z0 = consistency_apply(z_t, t, c, prior)
    return prior.decode(z0)


def _transition_logpdf(z_next: np.ndarray, t_next: int, g_prev: np.ndarray, schedule) -> float:
    ab = schedule.alpha_bar[t_next]
    resid = np.asarray(z_next, dtype=np.float64) - np.sqrt(ab) * g_prev
    return float(-np.sum(resid**2) / (2.0 * (1.0 - ab)))


def grad_logcond_c(
    z_next: np.ndarray,
    z_prev: np.ndarray,
    t_prev: int,
    t_next: int,
    c: np.ndarray,
    prior,
    fd_step: float = 1e-4,
    allow_fd: bool = True,
) -> np.ndarray:
    """Gradient in c of log p(z_next | z_prev, c) for one chain transition."""
    t_prev = _check_t(prior.schedule, t_prev)
    t_next = _check_t(prior.schedule, t_next, lo=1)
    if prior.kind == "analytic":
        return prior.grad_logcond(z_next, z_prev, t_prev, t_next, c)
    g = prior.grad_logcond(z_next, z_prev, t_prev, t_next, c)
    if g is not None:
        return g
    if not allow_fd:
        raise InvalidArgument(
            "prior does not support gradients and finite differences are disabled"
        )
    c = np.asarray(c, dtype=np.float64)
    out = np.empty_like(c)
    for i in range(c.size):
        bump = np.zeros_like(c)
        bump[i] = fd_step
        lo = _transition_logpdf(
            z_next, t_next, prior.consistency(z_prev, t_prev, c - bump), prior.schedule
        )
        hi = _transition_logpdf(
            z_next, t_next, prior.consistency(z_prev, t_prev, c + bump), prior.schedule
        )
        out[i] = (hi - lo) / (2.0 * fd_step)
    return out
