"""Stochastic-approximation tuning of the conditioning vector.

The marginal likelihood p(y|c) is intractable, but Fisher's identity turns
its gradient into a posterior expectation of the chain's conditional
log-density gradient. Each outer iteration therefore runs a short sampler
pass, differentiates the log-density of the visited latents in c, takes a
projected ascent step, and carries the sample forward as the next pass's
warm start. A longer pass with the tuned c produces the final sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from splitlang.errors import InvalidArgument
from splitlang.operators import op_pseudoinverse
from splitlang.sae import grad_logcond_c
from splitlang.sampler import ChainTrace, LatinoConfig, default_timesteps, latino_run


@dataclass(frozen=True)
class SapgConfig:
    m_outer: int = 15
    n_inner: int = 4
    final_steps: int = 8
    radius: float = 15.0
    gamma0: float = 0.1
    gamma_decay: float = 0.9
    gamma_delay: int = 10
    seed: int | None = None

    def __post_init__(self):
        if self.m_outer < 1:
            raise InvalidArgument("m_outer must be >= 1")
        if self.n_inner < 1 or self.final_steps < 1:
            raise InvalidArgument("n_inner and final_steps must be >= 1")
        if self.radius <= 0:
            raise InvalidArgument("radius must be positive")
        if self.gamma0 < 0:
            raise InvalidArgument("gamma0 must be nonnegative")
        if not 0 < self.gamma_decay <= 1:
            raise InvalidArgument("gamma_decay must lie in (0, 1]")
        if self.gamma_delay < 0:
            raise InvalidArgument("gamma_delay must be nonnegative")


@dataclass
class PromptState:
    c: np.ndarray
    c0: np.ndarray
    history: list[np.ndarray] = field(default_factory=list)
    grad_history: list[np.ndarray] = field(default_factory=list)


def gamma_schedule(m: int, gamma0: float = 0.1, decay: float = 0.9, delay: int = 10) -> float:
    """Step size for outer iteration m (1-based): flat, then geometric decay."""
    if m < 1:
        raise InvalidArgument("outer iteration index m is 1-based")
    if gamma0 < 0:
        raise InvalidArgument("gamma0 must be nonnegative")
    if not 0 < decay <= 1:
        raise InvalidArgument("decay must lie in (0, 1]")
    if delay < 0:
        raise InvalidArgument("delay must be nonnegative")
    return gamma0 * decay ** max(0, m - delay)


def project_ball(c: np.ndarray, c0: np.ndarray, r: float) -> np.ndarray:
    if r <= 0:
        raise InvalidArgument("radius must be positive")
    c = np.asarray(c, dtype=np.float64)
    c0 = np.asarray(c0, dtype=np.float64)
    diff = c - c0
    norm = float(np.linalg.norm(diff))
    if norm <= r:
        return c.copy()
    return c0 + (r / norm) * diff


def chain_grad(latents, c: np.ndarray, prior, allow_fd: bool = True) -> np.ndarray:
    """Gradient in c of the chain log-density over consecutive latent pairs.

    `latents` is a list of (z, t) whose head anchors the chain (the encoded
    warm start at t=0, or the previous pass's final latent); the caller is
    responsible for excluding the final latent of the current pass, whose
    transition belongs to the next one.
    """
    if len(latents) < 2:
        raise InvalidArgument("chain_grad needs at least two latents")
    c = np.asarray(c, dtype=np.float64)
    total = np.zeros_like(c)
    for (z_prev, t_prev), (z_next, t_next) in zip(latents, latents[1:]):
        total += grad_logcond_c(z_next, z_prev, t_prev, t_next, c, prior, allow_fd=allow_fd)
    return total


def _default_final_cfg(inner: LatinoConfig, final_steps: int) -> LatinoConfig:
    if inner.task == "custom":
        raise InvalidArgument(
            "custom inner task needs an explicit final_cfg (its delta_overrides "
            "cannot be inferred for a different step count)"
        )
    return replace(
        inner,
        n_steps=final_steps,
        timesteps=tuple(default_timesteps(final_steps)),
        delta_overrides=None,
    )


def latino_pro_run(
    y: np.ndarray,
    op,
    prior,
    c0: np.ndarray,
    cfg: SapgConfig,
    inner_cfg: LatinoConfig,
    final_cfg: LatinoConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, PromptState, list[ChainTrace]]:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if inner_cfg.n_steps != cfg.n_inner:
        raise InvalidArgument("inner_cfg.n_steps must equal cfg.n_inner")
    if final_cfg is None:
        final_cfg = _default_final_cfg(inner_cfg, cfg.final_steps)
    elif final_cfg.n_steps != cfg.final_steps:
        raise InvalidArgument("final_cfg.n_steps must equal cfg.final_steps")

    c0 = np.asarray(c0, dtype=np.float64)
    c = c0.copy()
    state = PromptState(c=c, c0=c0.copy(), history=[c0.copy()])
    traces: list[ChainTrace] = []

    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(op_pseudoinverse(op, y), dtype=np.float64)
    anchor = (prior.encode(x), 0)

    for m in range(1, cfg.m_outer + 1):
        x, trace = latino_run(y, op, prior, c, inner_cfg, rng, x0=x)
        traces.append(trace)
        # The final latent of this pass is excluded here; it anchors the
        # next pass instead, so every transition is counted exactly once.
        chain = [anchor] + trace.latents[:-1]
        grad = chain_grad(chain, c, prior)
        gamma = gamma_schedule(m, cfg.gamma0, cfg.gamma_decay, cfg.gamma_delay)
        c = project_ball(c + gamma * grad, c0, cfg.radius)
        state.history.append(c.copy())
        state.grad_history.append(grad)
        anchor = trace.latents[-1]

    x_final, final_trace = latino_run(y, op, prior, c, final_cfg, rng, x0=x)
    traces.append(final_trace)
    state.c = c.copy()
    return x_final, state, traces
