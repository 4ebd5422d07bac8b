import numpy as np
import pytest

from guidelab.distributions import (
    AffineMap,
    ClassMaps,
    FractalSpec,
    GaussianMixture,
    default_fractal_spec,
    fractal_sample,
    gmm_denoiser,
    gmm_logpdf,
    gmm_sample,
    gmm_score,
)
from guidelab.errors import ConfigError, DomainError
from guidelab.experiments import random_mixture
from guidelab.metrics import GridIndex
from guidelab.streams import RngStream


@pytest.fixture(scope="module")
def spec():
    return default_fractal_spec()


def test_non_contractive_map_rejected():
    with pytest.raises(ConfigError):
        AffineMap(1.01 * np.eye(2), np.zeros(2))


def test_fractal_samples_contained(spec):
    for c in range(spec.num_classes):
        pts = fractal_sample(spec, c, RngStream(0, f"f{c}"), 5000)
        assert np.all(pts >= spec.bbox[0] - 1e-9)
        assert np.all(pts <= spec.bbox[1] + 1e-9)


def test_fractal_deterministic(spec):
    a = fractal_sample(spec, 0, RngStream(3, "f"), 1000)
    b = fractal_sample(spec, 0, RngStream(3, "f"), 1000)
    assert np.array_equal(a, b)


def test_fractal_mixture_statistics(spec):
    # normalization targets the two-class mixture: mean 0, per-axis avg std 0.5
    pts = np.concatenate(
        [fractal_sample(spec, c, RngStream(1, f"f{c}"), 50_000) for c in range(2)]
    )
    assert np.all(np.abs(pts.mean(axis=0)) < 0.02)
    assert abs(np.sqrt(np.mean(pts.var(axis=0))) - 0.5) < 0.02


def test_fractal_self_similarity(spec):
    # the attractor is (approximately) invariant under each of its maps
    pts = fractal_sample(spec, 0, RngStream(2, "f"), 10_000)
    raw = spec.denormalize(pts)
    index = GridIndex(pts)
    for m in spec.classes[0].maps:
        mapped = spec.normalize(raw @ m.a.T + m.b)
        d = index.nn_dist(mapped)
        assert np.quantile(d, 0.99) < 0.02


def test_fractal_validation(spec):
    with pytest.raises(ConfigError):
        fractal_sample(spec, 5, RngStream(0, "f"), 10)
    with pytest.raises(ConfigError):
        fractal_sample(spec, 0, RngStream(0, "f"), 0)


def test_class_maps_validation():
    m = AffineMap(0.5 * np.eye(2), np.zeros(2))
    with pytest.raises(ConfigError):
        ClassMaps(maps=[m], weights=np.array([-1.0]))
    with pytest.raises(ConfigError):
        ClassMaps(maps=[], weights=np.array([]))


def test_gmm_validation():
    with pytest.raises(ConfigError):
        GaussianMixture([0.5, 0.6], [[0, 0], [1, 1]], [np.eye(2), np.eye(2)])
    with pytest.raises(ConfigError):
        GaussianMixture([1.0], [[0, 0]], [[[1.0, 2.0], [2.0, 1.0]]])  # not PD


def test_gmm_sample_single_component_mean():
    s = 0.7
    gmm = GaussianMixture([1.0], [[2.0, -1.0]], [s * s * np.eye(2)])
    n = 10_000
    pts = gmm_sample(gmm, RngStream(0, "g"), n)
    assert np.all(np.abs(pts.mean(axis=0) - [2.0, -1.0]) < 3 * s / np.sqrt(n))


def test_gmm_sample_point_mass_limit():
    eps = 1e-8
    gmm = GaussianMixture([1.0], [[0.5, 0.5]], [eps * np.eye(2)])
    pts = gmm_sample(gmm, RngStream(0, "g"), 1000)
    assert np.all(np.linalg.norm(pts - [0.5, 0.5], axis=1) < 5 * np.sqrt(eps))


def test_gmm_sample_balanced_components():
    gmm = GaussianMixture(
        [0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [0.01 * np.eye(2), 0.01 * np.eye(2)]
    )
    pts = gmm_sample(gmm, RngStream(1, "g"), 10_000)
    frac = np.mean(pts[:, 0] > 0)
    assert 0.485 <= frac <= 0.515


def test_denoiser_point_mass_returns_mean():
    gmm = GaussianMixture([1.0], [[0.3, -0.6]], [1e-12 * np.eye(2)])
    for x in ([0.0, 0.0], [5.0, -3.0]):
        assert np.allclose(gmm_denoiser(gmm, np.array(x), 2.0), [0.3, -0.6], atol=1e-9)


def test_denoiser_shrinkage_against_importance_sampling():
    # Monte Carlo posterior mean: weight x0 ~ N(0, I) draws by the noise
    # likelihood N(x; x0, sigma^2 I) at x=(2,0), sigma=1
    gmm = GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)])
    x = np.array([2.0, 0.0])
    d = gmm_denoiser(gmm, x, 1.0)
    x0 = RngStream(0, "is").gaussian(2 * 1_000_000).reshape(-1, 2)
    logw = -0.5 * np.sum((x - x0) ** 2, axis=1)
    w = np.exp(logw - logw.max())
    mc = (w[:, None] * x0).sum(axis=0) / w.sum()
    assert np.allclose(d, [1.0, 0.0], atol=1e-12)  # closed-form shrinkage 1/(1+sigma^2)
    assert np.all(np.abs(mc - d) < 5e-3)


def test_denoiser_symmetry():
    a = 1.3
    gmm = GaussianMixture(
        [0.5, 0.5], [[-a, 0.0], [a, 0.0]], [0.2 * np.eye(2), 0.2 * np.eye(2)]
    )
    for y in (-1.0, 0.0, 2.5):
        d = gmm_denoiser(gmm, np.array([0.0, y]), 0.7)
        assert abs(d[0]) < 1e-14


def test_denoiser_domain_error():
    gmm = GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)])
    with pytest.raises(DomainError):
        gmm_denoiser(gmm, np.zeros(2), 0.0)
    with pytest.raises(DomainError):
        gmm_score(gmm, np.zeros(2), -1.0)


def test_score_single_component_closed_form():
    gmm = GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)])
    s = gmm_score(gmm, np.array([2.0, 0.0]), 1.0)
    assert np.allclose(s, [-1.0, 0.0], atol=1e-14)


def test_score_matches_log_density_finite_differences():
    stream = RngStream(5, "fd")
    for _ in range(10):
        gmm = random_mixture(stream)
        x = 2.0 * stream.gaussian(2)
        sigma = float(np.exp(stream.gaussian(1)[0]))
        s = gmm_score(gmm, x, sigma)
        h = 1e-6
        for axis in range(2):
            e = np.zeros(2)
            e[axis] = h
            fd = (gmm_logpdf(gmm, x + e, sigma) - gmm_logpdf(gmm, x - e, sigma))[0] / (2 * h)
            assert abs(fd - s[axis]) < 1e-5 * max(1.0, abs(s[axis]))


def test_score_zero_at_symmetric_mode():
    gmm = GaussianMixture(
        [0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [0.3 * np.eye(2), 0.3 * np.eye(2)]
    )
    s = gmm_score(gmm, np.array([0.0, 0.0]), 0.5)
    assert np.allclose(s, 0.0, atol=1e-14)


def test_denoiser_score_identity_random_cases():
    stream = RngStream(0, "ident")
    worst = 0.0
    for _ in range(100):
        gmm = random_mixture(stream)
        x = 3.0 * stream.gaussian(2)
        sigma = 10.0 ** (stream.uniforms(1)[0] * 4 - 2)
        d = gmm_denoiser(gmm, x, sigma)
        s = gmm_score(gmm, x, sigma)
        worst = max(
            worst,
            np.linalg.norm((d - x) / sigma**2 - s) / max(np.linalg.norm(s), 1e-30),
        )
    assert worst < 1e-10


def test_denoiser_large_sigma_limit():
    stream = RngStream(1, "limit")
    for _ in range(10):
        gmm = random_mixture(stream)
        x = 3.0 * stream.gaussian(2)
        d = gmm_denoiser(gmm, x, 1e4)
        assert np.linalg.norm(d - gmm.mean) < 1e-4 * max(np.linalg.norm(gmm.mean), 1.0)


def test_log_space_stability_extreme_sigma():
    gmm = GaussianMixture(
        [0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [0.1 * np.eye(2), 0.2 * np.eye(2)]
    )
    for sigma in (1e-6, 1e-3, 1.0, 1e3, 1e6):
        for x in ([1e3, 1e3], [-1e3, 0.0], [0.1, 0.1]):
            d = gmm_denoiser(gmm, np.array(x), sigma)
            s = gmm_score(gmm, np.array(x), sigma)
            assert np.all(np.isfinite(d))
            assert np.all(np.isfinite(s))
