"""Experiment orchestration shared by the CLI and the test suite.

Everything here is a pure function of the RunConfig (plus explicit seed
overrides), so runs replay bit-exactly.
"""

from __future__ import annotations

import numpy as np

from . import metrics as met
from . import net as nnet
from .config import RunConfig
from .distributions import FractalSpec, GaussianMixture, fractal_sample, gmm_denoiser, gmm_sample, gmm_score
from .errors import UsageError
from .guidance import GuidanceSpec, GuidedDenoiser
from .sampler import SamplerConfig, sample, sigma_schedule
from .streams import RngStream, _derive_key
from .training import num_classes_of


def reference_set(cfg: RunConfig):
    """Ground-truth reference points: n_reference per class, fixed seed."""
    n_classes = num_classes_of(cfg.dist)
    pts, labels = [], []
    for c in range(n_classes):
        stream = RngStream(cfg.seed, f"reference/c{c}")
        if isinstance(cfg.dist, FractalSpec):
            pts.append(fractal_sample(cfg.dist, c, stream, cfg.n_reference))
        else:
            pts.append(gmm_sample(cfg.dist, stream, cfg.n_reference))
        labels.append(np.full(cfg.n_reference, c, dtype=np.int64))
    return np.concatenate(pts), np.concatenate(labels)


def oracle_denoiser(gmm: GaussianMixture):
    """Analytic posterior-mean denoiser as a GuidedDenoiser backend."""

    def fn(x, sigma, labels):
        return gmm_denoiser(gmm, x, sigma)

    return fn


def run_sampling(cfg: RunConfig, primary, spec: GuidanceSpec, weak=None, seed=None, workers=1):
    """Sample cfg.sample_n points split evenly over the classes; returns
    (points, class labels)."""
    spec.validate()
    if spec.mode == "autoguide" and weak is None:
        raise UsageError("autoguidance sampling requires a weak checkpoint")
    n_classes = (
        primary.num_classes if isinstance(primary, nnet.DenoiserNet) else num_classes_of(cfg.dist)
    )
    seed = cfg.sampler.seed if seed is None else seed
    scfg = SamplerConfig(
        steps=cfg.sampler.steps,
        sigma_min=cfg.sampler.sigma_min,
        sigma_max=cfg.sampler.sigma_max,
        rho=cfg.sampler.rho,
        integrator=cfg.sampler.integrator,
        seed=seed,
    )
    per_class = cfg.sample_n // n_classes + (cfg.sample_n % n_classes > 0)
    pts, labels = [], []
    for c in range(n_classes):
        n_c = min(per_class, cfg.sample_n - c * per_class)
        if n_c <= 0:
            break
        gd = GuidedDenoiser(primary, spec, weak=weak, seed=seed)
        pts.append(sample(gd, scfg, c, n_c, workers=workers))
        labels.append(np.full(n_c, c, dtype=np.int64))
    return np.concatenate(pts), np.concatenate(labels)


def evaluate_samples(cfg: RunConfig, samples, reference, index=None, grid=None, tau=None):
    if tau is None:
        tau = cfg.metric_tau
    if grid is None:
        grid = met.reference_grid(reference, bins=cfg.metric_bins, pad=cfg.metric_pad)
    return met.evaluate(samples, reference, tau_out=tau, grid=grid, bins=cfg.metric_bins, index=index)


FIG2_PANELS = (
    ("(a) ground truth", None),
    ("(b) unguided", GuidanceSpec(mode="unguided")),
    ("(c) CFG w=4", GuidanceSpec(mode="cfg", w=4.0)),
    ("(d) score truncation", GuidanceSpec(mode="truncate", tau=1.0)),
    ("(e) autoguidance w=1.5", GuidanceSpec(mode="autoguide", w=1.5)),
    ("(f) in-situ w=2 p=0.1", GuidanceSpec(mode="insitu", w=2.0, p=0.1)),
)


def derived_seed(master: int, label: str) -> int:
    """Stable 64-bit seed derived from (master seed, label)."""
    return _derive_key(master, label) % (1 << 64)


# ---------------------------------------------------------------------------
# Analytic-oracle verification suite
# ---------------------------------------------------------------------------

def random_mixture(stream: RngStream, max_components=3) -> GaussianMixture:
    k = 1 + int(stream.uniforms(1)[0] * max_components)
    w = stream.uniforms(k) + 0.2
    means = stream.gaussian(2 * k).reshape(k, 2)
    covs = []
    for _ in range(k):
        a = stream.gaussian(4).reshape(2, 2) * 0.5
        covs.append(a @ a.T + 0.05 * np.eye(2))
    return GaussianMixture(w / w.sum(), means, np.array(covs))


def eq1_identity_error(n_cases=100, seed=0):
    """Max relative error of (D(x; s) - x)/s^2 against the exact score over
    random mixtures, points, and noise levels in [1e-2, 1e2]."""
    stream = RngStream(seed, "eq1")
    worst = 0.0
    for _ in range(n_cases):
        gmm = random_mixture(stream)
        x = 3.0 * stream.gaussian(2)
        sigma = 10.0 ** (stream.uniforms(1)[0] * 4.0 - 2.0)
        d = gmm_denoiser(gmm, x, sigma)
        s_exact = gmm_score(gmm, x, sigma)
        s_from_d = (d - x) / sigma**2
        err = np.linalg.norm(s_from_d - s_exact) / max(np.linalg.norm(s_exact), 1e-30)
        worst = max(worst, err)
    return worst


def convergence_orders(gmm=None, n_points=64, seed=0, n_coarse=48, ref_steps=1024):
    """Empirical global order of the Euler and Heun integrators on the
    analytic oracle, measured against a fine-step reference trajectory."""
    if gmm is None:
        gmm = GaussianMixture(
            [0.5, 0.5], [[-1.0, 0.0], [1.0, 0.5]], [0.08 * np.eye(2), 0.12 * np.eye(2)]
        )
    backend = oracle_denoiser(gmm)
    spec = GuidanceSpec(mode="unguided")

    def endpoint(steps, integrator):
        scfg = SamplerConfig(steps=steps, integrator=integrator, seed=seed)
        gd = GuidedDenoiser(backend, spec, seed=seed)
        return sample(gd, scfg, 0, n_points)

    ref = endpoint(ref_steps, "heun")
    orders = {}
    for integrator in ("euler", "heun"):
        e1 = np.mean(np.linalg.norm(endpoint(n_coarse, integrator) - ref, axis=1))
        e2 = np.mean(np.linalg.norm(endpoint(2 * n_coarse, integrator) - ref, axis=1))
        orders[integrator] = float(np.log2(e1 / e2))
    return orders


def gmm_recovery_kl(gmm=None, n=100_000, steps=64, seed=0, bins=64):
    """Histogram KL between oracle-denoiser samples and direct mixture draws."""
    if gmm is None:
        gmm = GaussianMixture(
            [0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [0.05 * np.eye(2), 0.05 * np.eye(2)]
        )
    gd = GuidedDenoiser(oracle_denoiser(gmm), GuidanceSpec(mode="unguided"), seed=seed)
    scfg = SamplerConfig(steps=steps, seed=seed)
    generated = sample(gd, scfg, 0, n)
    reference = gmm_sample(gmm, RngStream(seed, "gmm-ref"), n)
    # 4-sigma box around the mixture mean
    std = np.sqrt(
        np.mean([np.trace(c) / 2 + np.sum((m - gmm.mean) ** 2) / 2 for c, m in zip(gmm.covs, gmm.means)])
    )
    lo = gmm.mean - 4 * std
    hi = gmm.mean + 4 * std
    grid = met.Grid(bins=bins, lo=lo, hi=hi)
    return met.hist_kl(generated, reference, grid)
