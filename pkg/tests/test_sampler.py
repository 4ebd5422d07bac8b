import mpmath
import numpy as np
import pytest

from guidelab.distributions import GaussianMixture, gmm_sample
from guidelab.errors import ConfigError
from guidelab.experiments import convergence_orders, oracle_denoiser
from guidelab.guidance import GuidanceSpec, GuidedDenoiser
from guidelab.sampler import SamplerConfig, ode_step, sample, sigma_schedule
from guidelab.streams import RngStream


def test_schedule_endpoints_exact():
    levels = sigma_schedule(SamplerConfig(steps=64))
    assert levels[0] == 80.0
    assert levels[-1] == 0.002
    assert np.all(np.diff(levels) < 0)


def test_schedule_middle_level_high_precision():
    # N=3 puts the middle level at i/(N-1) = 1/2; check against 50-digit mpmath
    cfg = SamplerConfig(steps=3, sigma_min=0.002, sigma_max=80.0, rho=7.0)
    levels = sigma_schedule(cfg)
    with mpmath.workdps(50):
        inv = mpmath.mpf(1) / 7
        mid = (mpmath.mpf(80) ** inv + mpmath.mpf("0.5") * (mpmath.mpf("0.002") ** inv - mpmath.mpf(80) ** inv)) ** 7
        assert abs(levels[1] - float(mid)) < 1e-12 * float(mid)


def test_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(steps=1).validate()
    with pytest.raises(ConfigError):
        SamplerConfig(sigma_min=0.0).validate()
    with pytest.raises(ConfigError):
        SamplerConfig(integrator="rk4").validate()


def _constant_gd(value):
    v = np.asarray(value, dtype=float)

    def fn(x, sigma, labels):
        return np.broadcast_to(v, np.atleast_2d(x).shape).copy()

    return GuidedDenoiser(fn, GuidanceSpec(mode="unguided"))


def test_degenerate_step_is_copy():
    gd = _constant_gd([0.0, 0.0])
    x = np.array([[1.0, 2.0]])
    out = ode_step(gd, x, np.array([0]), 1.0, 1.0)
    assert np.array_equal(out, x)
    assert out is not x


def test_ode_step_rejects_increasing_sigma():
    gd = _constant_gd([0.0, 0.0])
    with pytest.raises(ConfigError):
        ode_step(gd, np.zeros((1, 2)), np.array([0]), 0.5, 1.0)


def test_heun_exact_for_constant_denoiser():
    # With D constant the ODE is linear in x and sigma: the exact solution is
    # x(s) = D + (s / s0) * (x0 - D), which Heun reproduces exactly.
    gd = _constant_gd([0.5, 0.5])
    x0 = np.array([[1.0, 1.0]])
    out = ode_step(gd, x0, np.array([0]), 1.0, 0.5, "heun")
    exact = 0.5 + 0.5 * (x0 - 0.5)
    assert np.allclose(out, exact, atol=1e-14)


def test_terminal_step_reaches_denoiser_output():
    # a single Euler step from sigma_min to 0 lands on D exactly when D is constant
    gd = _constant_gd([0.3, -0.3])
    out = ode_step(gd, np.array([[0.3, -0.3]]), np.array([0]), 0.002, 0.0, "euler")
    assert np.allclose(out, [[0.3, -0.3]], atol=1e-15)


def test_point_mass_recovery():
    gmm = GaussianMixture([1.0], [[0.4, -0.7]], [1e-10 * np.eye(2)])
    gd = GuidedDenoiser(oracle_denoiser(gmm), GuidanceSpec(mode="unguided"), seed=0)
    pts = sample(gd, SamplerConfig(steps=32, seed=0), 0, 16)
    assert np.all(np.linalg.norm(pts - [0.4, -0.7], axis=1) < 1e-3)


def test_single_gaussian_recovery():
    cov = np.array([[0.09, 0.02], [0.02, 0.04]])
    gmm = GaussianMixture([1.0], [[0.2, -0.1]], [cov])
    gd = GuidedDenoiser(oracle_denoiser(gmm), GuidanceSpec(mode="unguided"), seed=0)
    pts = sample(gd, SamplerConfig(steps=64, seed=0), 0, 4096)
    assert np.all(np.abs(pts.mean(axis=0) - [0.2, -0.1]) < 0.02)
    emp = np.cov(pts.T)
    assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.06


def test_convergence_orders_in_range():
    orders = convergence_orders()
    assert 0.8 <= orders["euler"] <= 1.2
    assert 1.7 <= orders["heun"] <= 2.3


def test_worker_count_does_not_change_output():
    gmm = GaussianMixture(
        [0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [0.05 * np.eye(2), 0.05 * np.eye(2)]
    )
    cfg = SamplerConfig(steps=16, seed=3)
    outs = []
    for workers in (1, 2, 4):
        gd = GuidedDenoiser(oracle_denoiser(gmm), GuidanceSpec(mode="unguided"), seed=3)
        outs.append(sample(gd, cfg, 0, 300, workers=workers))
    assert np.array_equal(outs[0], outs[1])
    assert np.array_equal(outs[0], outs[2])


def test_sample_count_independence():
    # the first k samples of a larger request match a smaller request exactly
    gmm = GaussianMixture([1.0], [[0.0, 0.0]], [0.1 * np.eye(2)])
    cfg = SamplerConfig(steps=12, seed=1)
    gd = GuidedDenoiser(oracle_denoiser(gmm), GuidanceSpec(mode="unguided"), seed=1)
    small = sample(gd, cfg, 0, 40)
    gd = GuidedDenoiser(oracle_denoiser(gmm), GuidanceSpec(mode="unguided"), seed=1)
    big = sample(gd, cfg, 0, 100)
    assert np.array_equal(big[:40], small)


def test_insitu_sampling_deterministic_with_network():
    from guidelab.net import default_widths, net_init

    net = net_init(default_widths((32, 32)), 2, seed=0)
    cfg = SamplerConfig(steps=8, seed=2)
    spec = GuidanceSpec(mode="insitu", w=2.0, p=0.1)
    a = sample(GuidedDenoiser(net, spec, seed=2), cfg, 0, 20)
    b = sample(GuidedDenoiser(net, spec, seed=2), cfg, 0, 20)
    assert np.array_equal(a, b)
    c = sample(GuidedDenoiser(net, spec, seed=4), cfg, 0, 20)
    assert not np.array_equal(a, c)


def test_sample_distribution_matches_direct_draws():
    gmm = GaussianMixture(
        [0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [0.05 * np.eye(2), 0.05 * np.eye(2)]
    )
    gd = GuidedDenoiser(oracle_denoiser(gmm), GuidanceSpec(mode="unguided"), seed=0)
    pts = sample(gd, SamplerConfig(steps=64, seed=0), 0, 4000)
    direct = gmm_sample(gmm, RngStream(0, "direct"), 4000)
    # bimodal along x: per-sample std is near 1, so allow ~5 standard errors
    assert np.all(np.abs(pts.mean(axis=0) - direct.mean(axis=0)) < 0.11)
    frac = np.mean(pts[:, 0] > 0)
    assert 0.45 <= frac <= 0.55
