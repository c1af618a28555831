"""Noise schedule, analytic prior, consistency map, and prompt gradients.

The consistency map's closed form is validated against an independent
numerical integration of the probability-flow ODE before anything else
trusts it, and the prompt gradient against central finite differences of
the transition log-density.
"""

from __future__ import annotations

import numpy as np
import pytest

from splitlang import (
    AnalyticGaussianPrior,
    NoiseSchedule,
    RemotePrior,
    consistency_apply,
    encode_stochastic,
    grad_logcond_c,
    identity_op,
    make_schedule,
    sae_step,
)
from splitlang.errors import InvalidArgument, ProtocolError
from splitlang.protocol import EchoBackend, EchoServer
from splitlang.sae import analytic_posterior, _transition_logpdf

from tests.oracles import rel_err


# ---------------------------------------------------------------- oracles


def flow_ode_endpoint(z_t: float, a_start: float, w: float, s: float, n_steps: int = 4000) -> float:
    """RK4 integration of the 1-D probability-flow ODE, parametrized by
    a = alpha_bar, from a_start up to 1 (i.e. t down to 0).

    dz/da = [z/2 - (z - sqrt(a) w) / (2 (a s + 1 - a))] / a
    """

    def rhs(a, z):
        var = a * s + 1.0 - a
        return (0.5 * z - 0.5 * (z - np.sqrt(a) * w) / var) / a

    z = float(z_t)
    a = float(a_start)
    h = (1.0 - a_start) / n_steps
    for _ in range(n_steps):
        k1 = rhs(a, z)
        k2 = rhs(a + h / 2, z + h * k1 / 2)
        k3 = rhs(a + h / 2, z + h * k2 / 2)
        k4 = rhs(a + h, z + h * k3)
        z += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        a += h
    return z


def chain_logpdf(z_next, z_prev, t_prev, t_next, c, prior) -> float:
    g = prior.consistency(z_prev, t_prev, c)
    return _transition_logpdf(z_next, t_next, g, prior.schedule)


def small_prior(rng, shape=(1, 4, 4), cond_dim=3, schedule=None) -> AnalyticGaussianPrior:
    d = int(np.prod(shape))
    s = 0.5 + rng.random(d)
    W = rng.standard_normal((d, cond_dim))
    b = rng.standard_normal(shape) * 0.1
    return AnalyticGaussianPrior(shape, W, s, offset=b, schedule=schedule)


# --------------------------------------------------------------- schedule


def test_schedule_endpoints():
    sched = make_schedule("linear_ddpm", 1000)
    assert sched.alpha_bar[0] == 1.0
    assert sched.alpha_bar[1] == 1.0 - 1e-4
    assert sched.beta[0] == 1e-4 and sched.beta[-1] == 2e-2


def test_schedule_matches_direct_product_oracle():
    sched = make_schedule("linear_ddpm", 1000)
    prod = 1.0
    for b in np.linspace(1e-4, 2e-2, 1000):
        prod *= 1.0 - b
    assert abs(sched.alpha_bar[1000] - prod) <= 1e-18
    assert abs(prod - 4.035829765375676e-05) < 1e-15


def test_schedule_monotone_and_bounded():
    sched = make_schedule("linear_ddpm", 1000)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    root = np.sqrt(sched.alpha_bar)
    assert np.all(root > 0) and np.all(root <= 1.0)


def test_schedule_rejects_unknown_kind_and_bad_T():
    with pytest.raises(InvalidArgument):
        make_schedule("cosine", 1000)
    with pytest.raises(InvalidArgument):
        make_schedule("linear_ddpm", 0)


def test_schedule_type_rejects_inconsistent_alpha_bar():
    beta = np.array([0.5])
    with pytest.raises(InvalidArgument, match="cumulative product"):
        NoiseSchedule(T=1, beta=beta, alpha_bar=np.array([1.0, 0.4]))


# ----------------------------------------------------------- prior basics


def test_prior_round_trip_and_offset(rng):
    prior = small_prior(rng)
    z = rng.standard_normal(prior.d)
    assert rel_err(prior.encode(prior.decode(z)), z) < 1e-6
    assert np.allclose(prior.decode(np.zeros(prior.d)), prior.b, atol=1e-12)


def test_prior_keep_subset_round_trip(rng):
    shape = (1, 4, 4)
    keep = np.array([0, 1, 4, 5, 7])
    prior = AnalyticGaussianPrior(shape, np.zeros((5, 2)), np.ones(5), keep=keep)
    z = rng.standard_normal(5)
    assert rel_err(prior.encode(prior.decode(z)), z) < 1e-6


def test_prior_validation(rng):
    shape = (1, 4, 4)
    with pytest.raises(InvalidArgument, match="positive"):
        AnalyticGaussianPrior(shape, np.zeros((16, 2)), -1.0)
    with pytest.raises(InvalidArgument, match="cond_map"):
        AnalyticGaussianPrior(shape, np.zeros((4, 2)), np.ones(16))
    with pytest.raises(InvalidArgument, match="unique"):
        AnalyticGaussianPrior(shape, np.zeros((2, 1)), np.ones(2), keep=np.array([3, 3]))
    with pytest.raises(InvalidArgument, match="offset"):
        AnalyticGaussianPrior(shape, np.zeros((16, 2)), 1.0, offset=np.zeros((1, 2, 2)))


def test_prior_score_matches_fd(rng):
    prior = small_prior(rng)
    c = rng.standard_normal(prior.cond_dim)
    x = rng.standard_normal(prior.shape)

    def logp(img):
        dev = prior.encode(img) - prior.cond_mean(c)
        return -0.5 * float(np.sum(dev**2 / prior.s))

    score = prior.score_x(x, c)
    h = 1e-5
    for idx in [(0, 0, 0), (0, 1, 3), (0, 3, 2)]:
        bump = np.zeros(prior.shape)
        bump[idx] = h
        fd = (logp(x + bump) - logp(x - bump)) / (2 * h)
        assert abs(score[idx] - fd) < 1e-6


# --------------------------------------------------------- encode / decode


def test_encode_stochastic_t0_is_exact(rng):
    prior = small_prior(rng)
    x = rng.standard_normal(prior.shape)
    z = encode_stochastic(x, 0, prior, rng)
    assert np.array_equal(z, prior.encode(x))


def test_encode_stochastic_deterministic_under_seed(rng):
    prior = small_prior(rng)
    x = rng.standard_normal(prior.shape)
    a = encode_stochastic(x, 500, prior, np.random.default_rng(99))
    b = encode_stochastic(x, 500, prior, np.random.default_rng(99))
    assert np.array_equal(a, b)


def test_encode_stochastic_terminal_is_standard_normal(rng):
    prior = small_prior(rng)
    x = rng.standard_normal(prior.shape)
    n = 10_000
    draws = np.stack([encode_stochastic(x, 1000, prior, rng) for _ in range(n)])
    assert np.all(np.abs(draws.mean(axis=0)) < 4.0 / np.sqrt(n) + 2e-2)
    assert np.all(np.abs(draws.std(axis=0) - 1.0) < 5e-2)


def test_encode_stochastic_rejects_out_of_range(rng):
    prior = small_prior(rng)
    x = np.zeros(prior.shape)
    for t in (-1, 1001):
        with pytest.raises(InvalidArgument, match="timestep"):
            encode_stochastic(x, t, prior, rng)


# ------------------------------------------------------------- consistency


def test_consistency_t0_identity(rng):
    prior = small_prior(rng)
    z = rng.standard_normal(prior.d)
    c = rng.standard_normal(prior.cond_dim)
    assert rel_err(consistency_apply(z, 0, c, prior), z) < 1e-10


def test_consistency_stationary_prior_identity(rng):
    shape = (1, 4, 4)
    prior = AnalyticGaussianPrior(shape, np.zeros((16, 2)), 1.0)
    z = rng.standard_normal(16)
    c = np.zeros(2)
    for t in (1, 124, 499, 999):
        assert rel_err(consistency_apply(z, t, c, prior), z) < 1e-12


def test_consistency_1d_closed_form_and_ode_oracle():
    # one latent coordinate, s = 4, alpha_bar at t=1 equal to 0.5
    sched = NoiseSchedule(T=1, beta=np.array([0.5]), alpha_bar=np.array([1.0, 0.5]))
    prior = AnalyticGaussianPrior((1, 1, 1), np.zeros((1, 1)), 4.0, schedule=sched)
    z0 = prior.consistency(np.array([1.0]), 1, np.zeros(1))
    expected = 1.2649110640673518  # 2 / sqrt(2.5)
    assert abs(z0[0] - expected) < 1e-12
    ode = flow_ode_endpoint(1.0, 0.5, w=0.0, s=4.0)
    assert abs(z0[0] - ode) < 1e-7


def test_consistency_matches_ode_oracle_with_nonzero_mean():
    sched = NoiseSchedule(T=1, beta=np.array([0.7]), alpha_bar=np.array([1.0, 0.3]))
    prior = AnalyticGaussianPrior(
        (1, 1, 1), np.array([[2.0]]), 0.25, schedule=sched
    )
    c = np.array([1.3])  # latent mean w = 2.6
    z_t = np.array([-0.4])
    closed = prior.consistency(z_t, 1, c)
    ode = flow_ode_endpoint(-0.4, 0.3, w=2.6, s=0.25)
    assert abs(closed[0] - ode) < 1e-7


def test_consistency_self_consistent_along_trajectory(rng):
    prior = small_prior(rng)
    c = rng.standard_normal(prior.cond_dim)
    w = prior.cond_mean(c)
    z_end = w + np.sqrt(prior.s) * rng.standard_normal(prior.d)
    sched = prior.schedule
    outputs = []
    for t in (124, 249, 499, 749, 999):
        ab = sched.alpha_bar[t]
        sigma_t = np.sqrt(ab * prior.s + 1.0 - ab)
        z_t = np.sqrt(ab) * w + sigma_t * (z_end - w) / np.sqrt(prior.s)
        outputs.append(consistency_apply(z_t, t, c, prior))
    for out in outputs:
        assert rel_err(out, z_end) < 1e-5


# ------------------------------------------------------------- sae_step


def test_sae_step_t0_round_trip(rng):
    prior = small_prior(rng)
    x = prior.decode(rng.standard_normal(prior.d))
    c = rng.standard_normal(prior.cond_dim)
    out = sae_step(x, 0, c, prior, rng)
    assert rel_err(out, x) < 1e-5


def test_sae_step_terminal_samples_prior(rng):
    prior = small_prior(rng)
    c = rng.standard_normal(prior.cond_dim)
    target = prior.decode(prior.cond_mean(c))
    n = 10_000
    x = np.zeros(prior.shape)
    acc = np.zeros(prior.shape)
    for _ in range(n):
        acc += sae_step(x, 1000, c, prior, rng)
    mean = acc / n
    # per-pixel std is bounded by sqrt(max s); 4 sigma / sqrt(N) margin
    bound = 4.0 * np.sqrt(prior.s.max() / n)
    assert np.max(np.abs(mean - target)) < bound + 1e-3


def test_sae_step_fixed_point_moments(rng):
    prior = small_prior(rng)
    c = rng.standard_normal(prior.cond_dim)
    w = prior.cond_mean(c)
    n = 10_000
    t = 499
    lat = np.empty((n, prior.d))
    for i in range(n):
        x = prior.decode(w + np.sqrt(prior.s) * rng.standard_normal(prior.d))
        lat[i] = prior.encode(sae_step(x, t, c, prior, rng))
    mean = lat.mean(axis=0)
    var = lat.var(axis=0)
    assert np.all(np.abs(mean - w) <= 5.0 * np.sqrt(prior.s / n))
    assert np.all(np.abs(var - prior.s) <= 5.0 * prior.s * np.sqrt(2.0 / n))


def test_sae_step_contracts_toward_prior_mean(rng):
    prior = small_prior(rng)
    c = rng.standard_normal(prior.cond_dim)
    target = prior.decode(prior.cond_mean(c))
    n_chains, t = 200, 124
    xs = [target + 50.0 * np.ones(prior.shape) for _ in range(n_chains)]
    dists = []
    for _ in range(10):
        xs = [sae_step(x, t, c, prior, rng) for x in xs]
        mean = sum(xs) / n_chains
        dists.append(float(np.linalg.norm(mean - target)))
    assert all(b < a for a, b in zip(dists, dists[1:]))


# -------------------------------------------------------- prompt gradient


def test_grad_logcond_zero_when_w_zero(rng):
    prior = AnalyticGaussianPrior((1, 4, 4), np.zeros((16, 3)), 1.0)
    z = rng.standard_normal(16)
    g = grad_logcond_c(z, z, 499, 999, np.zeros(3), prior)
    assert np.array_equal(g, np.zeros(3))


def test_grad_logcond_zero_at_zero_residual(rng):
    prior = small_prior(rng)
    c = rng.standard_normal(prior.cond_dim)
    z_prev = rng.standard_normal(prior.d)
    t_prev, t_next = 749, 499
    g_prev = prior.consistency(z_prev, t_prev, c)
    z_next = np.sqrt(prior.schedule.alpha_bar[t_next]) * g_prev
    g = grad_logcond_c(z_next, z_prev, t_prev, t_next, c, prior)
    assert np.max(np.abs(g)) < 1e-12


def test_grad_logcond_anchor_term_vanishes(rng):
    # G at t=0 ignores c, so the anchored initial transition has zero grad
    prior = small_prior(rng)
    c = rng.standard_normal(prior.cond_dim)
    anchor = rng.standard_normal(prior.d)
    z1 = rng.standard_normal(prior.d)
    g = grad_logcond_c(z1, anchor, 0, 999, c, prior)
    assert np.max(np.abs(g)) < 1e-12


def test_grad_logcond_matches_fd_on_random_instances(rng):
    failures = 0
    for _ in range(50):
        prior = small_prior(rng)
        c = rng.standard_normal(prior.cond_dim)
        z_prev = rng.standard_normal(prior.d)
        z_next = rng.standard_normal(prior.d)
        t_prev, t_next = 749, 499
        g = grad_logcond_c(z_next, z_prev, t_prev, t_next, c, prior)
        h = 1e-3
        fd = np.empty_like(c)
        for i in range(c.size):
            bump = np.zeros_like(c)
            bump[i] = h
            hi = chain_logpdf(z_next, z_prev, t_prev, t_next, c + bump, prior)
            lo = chain_logpdf(z_next, z_prev, t_prev, t_next, c - bump, prior)
            fd[i] = (hi - lo) / (2 * h)
        if rel_err(g, fd) > 1e-5:
            failures += 1
    assert failures == 0


def test_grad_logcond_rejects_t_next_zero(rng):
    prior = small_prior(rng)
    z = np.zeros(prior.d)
    with pytest.raises(InvalidArgument):
        grad_logcond_c(z, z, 0, 0, np.zeros(prior.cond_dim), prior)


# ------------------------------------------------------ analytic posterior


def test_analytic_posterior_identity_closed_form(rng):
    shape = (1, 4, 4)
    v = 0.7
    prior = AnalyticGaussianPrior(shape, rng.standard_normal((16, 2)), v)
    c = rng.standard_normal(2)
    op = identity_op(noise_sigma=0.3)
    x_true = prior.decode(prior.cond_mean(c) + np.sqrt(v) * rng.standard_normal(16))
    y = x_true + 0.3 * rng.standard_normal(shape)
    mean, var = analytic_posterior(prior, op, y, c)
    # isotropic prior in an orthonormal basis: per-pixel conjugate blend
    mu_x = prior.decode(prior.cond_mean(c))
    s2 = 0.3**2
    expected_mean = (v * y + s2 * mu_x) / (v + s2)
    expected_var = v * s2 / (v + s2)
    assert rel_err(mean, expected_mean) < 1e-9
    assert np.allclose(var, expected_var, rtol=1e-9)


# ------------------------------------------------------------ remote prior


@pytest.fixture()
def remote_prior():
    backend = EchoBackend(latent_shape=(1, 4, 4), cond_dim=3, timesteps=(999, 749, 499, 249))
    with EchoServer(backend) as server:
        prior = RemotePrior.connect("127.0.0.1", server.port)
        yield prior
        prior.close()


def test_remote_prior_round_trip(rng, remote_prior):
    z = rng.standard_normal((1, 4, 4)).astype(np.float32)
    back = remote_prior.encode(remote_prior.decode(z))
    assert np.array_equal(back.astype(np.float32), z)
    assert remote_prior.autoencoding_error(z) == 0.0


def test_remote_prior_advertised_set_enforced(rng, remote_prior):
    assert remote_prior.supports_t(999)
    assert not remote_prior.supports_t(500)
    z = np.zeros((1, 4, 4))
    with pytest.raises(ProtocolError, match="timestep"):
        consistency_apply(z, 500, np.zeros(3), remote_prior)


def test_remote_prior_sampler_ops(rng, remote_prior):
    x = rng.standard_normal((1, 4, 4))
    z = encode_stochastic(x, 999, remote_prior, rng)
    assert z.shape == (1, 4, 4)
    z0 = consistency_apply(z, 999, np.zeros(3), remote_prior)
    assert np.allclose(z0, z.astype(np.float32), atol=1e-6)


def test_remote_prior_fd_fallback_zero_for_echo(rng, remote_prior):
    # echo consistency ignores c entirely, so the FD gradient must vanish
    z_prev = rng.standard_normal((1, 4, 4))
    z_next = rng.standard_normal((1, 4, 4))
    g = grad_logcond_c(z_next, z_prev, 249, 999, np.zeros(3), remote_prior)
    assert np.array_equal(g, np.zeros(3))


def test_remote_prior_fd_disabled_rejected(rng, remote_prior):
    z = np.zeros((1, 4, 4))
    with pytest.raises(InvalidArgument, match="finite differences"):
        grad_logcond_c(z, z, 249, 999, np.zeros(3), remote_prior, allow_fd=False)
