"""Ground-truth 2D data sources.

Two families:

- `FractalSpec`: class-conditional iterated-function-system attractors sampled
  by the chaos game, normalized to mean 0 / std 0.5 using the exact stationary
  moments of the IFS (solved in closed form from the maps, no sampling).
- `GaussianMixture`: analytic mixture with closed-form optimal denoiser
  (posterior mean) and score, used as an exactness oracle throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .streams import RngStream


# ---------------------------------------------------------------------------
# Fractal (IFS) distributions
# ---------------------------------------------------------------------------

@dataclass
class AffineMap:
    """x -> A x + b with spectral norm of A strictly below 1."""

    a: np.ndarray  # (2, 2)
    b: np.ndarray  # (2,)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float).reshape(2, 2)
        self.b = np.asarray(self.b, dtype=float).reshape(2)
        if np.linalg.norm(self.a, 2) >= 1.0:
            raise ConfigError(
                f"IFS map is not a contraction (spectral norm {np.linalg.norm(self.a, 2):.4f})"
            )


@dataclass
class ClassMaps:
    maps: list          # list of AffineMap
    weights: np.ndarray  # positive, normalized

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.maps) != len(self.weights) or len(self.maps) == 0:
            raise ConfigError("each class needs matching, nonempty maps and weights")
        if np.any(self.weights <= 0):
            raise ConfigError("IFS selection weights must be positive")
        self.weights = self.weights / self.weights.sum()


def _stationary_moments(cm: ClassMaps):
    """Exact stationary mean and second moment of the IFS Markov chain.

    The chain x' = A_J x + b_J has m = (I - sum w A)^-1 sum w b and a second
    moment solving a 4x4 linear system obtained by vectorization.
    """
    wa = sum(w * m.a for w, m in zip(cm.weights, cm.maps))
    wb = sum(w * m.b for w, m in zip(cm.weights, cm.maps))
    m = np.linalg.solve(np.eye(2) - wa, wb)
    lhs = np.eye(4)
    rhs = np.zeros((2, 2))
    for w, mp in zip(cm.weights, cm.maps):
        lhs -= w * np.kron(mp.a, mp.a)
        am = mp.a @ m
        rhs += w * (np.outer(am, mp.b) + np.outer(mp.b, am) + np.outer(mp.b, mp.b))
    s = np.linalg.solve(lhs, rhs.reshape(4)).reshape(2, 2)
    return m, s


def _attractor_radius(cm: ClassMaps, center):
    """Radius R with attractor within the ball B(center, R): fixed point of
    R -> max_k (||A_k|| R + ||A_k c + b_k - c||)."""
    s = max(np.linalg.norm(m.a, 2) for m in cm.maps)
    d = max(np.linalg.norm(m.a @ center + m.b - center) for m in cm.maps)
    return d / (1.0 - s)


@dataclass
class FractalSpec:
    classes: list                # list of ClassMaps
    warm_up: int = 64
    target_std: float = 0.5
    # normalization and bounds, derived in __post_init__
    norm_mean: np.ndarray = field(default=None)
    norm_scale: float = field(default=None)
    bbox: np.ndarray = field(default=None)  # (2, 2): [[xmin, ymin], [xmax, ymax]]

    def __post_init__(self):
        if not self.classes:
            raise ConfigError("fractal spec needs at least one class")
        means, seconds = zip(*(_stationary_moments(c) for c in self.classes))
        mean = np.mean(means, axis=0)
        second = np.mean(seconds, axis=0)
        cov = second - np.outer(mean, mean)
        self.norm_mean = mean
        self.norm_scale = self.target_std / np.sqrt(np.trace(cov) / 2.0)
        lo = np.full(2, np.inf)
        hi = np.full(2, -np.inf)
        for cm, m in zip(self.classes, means):
            r = _attractor_radius(cm, m)
            lo = np.minimum(lo, self.normalize(m - r))
            hi = np.maximum(hi, self.normalize(m + r))
        self.bbox = np.stack([lo, hi])

    @property
    def num_classes(self):
        return len(self.classes)

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.norm_mean) * self.norm_scale

    def denormalize(self, y):
        return np.asarray(y, dtype=float) / self.norm_scale + self.norm_mean


def _triangle_vertices():
    ang = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def default_fractal_spec() -> FractalSpec:
    """Two classes: a Sierpinski triangle, and a rotated/reshaped variant with
    a sparse off-attractor branch (weight 0.1)."""
    verts = _triangle_vertices()
    class0 = ClassMaps(
        maps=[AffineMap(0.5 * np.eye(2), 0.5 * v) for v in verts],
        weights=np.full(3, 1.0 / 3.0),
    )
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])  # 90 degrees
    a1 = 0.45 * rot
    maps1 = [AffineMap(a1, (np.eye(2) - a1) @ (rot @ v)) for v in verts]
    a_branch = 0.6 * np.array(
        [[np.cos(np.pi / 6), -np.sin(np.pi / 6)], [np.sin(np.pi / 6), np.cos(np.pi / 6)]]
    )
    maps1.append(AffineMap(a_branch, (np.eye(2) - a_branch) @ np.array([1.2, 1.2])))
    class1 = ClassMaps(maps=maps1, weights=np.array([0.3, 0.3, 0.3, 0.1]))
    return FractalSpec(classes=[class0, class1])


def fractal_sample(spec: FractalSpec, class_id: int, stream: RngStream, n: int) -> np.ndarray:
    """Chaos-game sampling: random start in the bounding box, `warm_up` unrecorded
    iterations, then one recorded point per iteration.  Returns (n, 2) normalized
    points."""
    if not 0 <= class_id < spec.num_classes:
        raise ConfigError(f"class_id {class_id} out of range")
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    cm = spec.classes[class_id]
    cum = np.cumsum(cm.weights)
    total = spec.warm_up + n
    u_start = stream.uniforms(2)
    u_sel = stream.uniforms(total)
    picks = np.searchsorted(cum, u_sel, side="right")
    np.clip(picks, 0, len(cm.maps) - 1, out=picks)
    lo = spec.denormalize(spec.bbox[0])
    hi = spec.denormalize(spec.bbox[1])
    x = lo + u_start * (hi - lo)
    mats = np.stack([m.a for m in cm.maps])
    offs = np.stack([m.b for m in cm.maps])
    out = np.empty((n, 2))
    for t in range(total):
        k = picks[t]
        x = mats[k] @ x + offs[k]
        if t >= spec.warm_up:
            out[t - spec.warm_up] = x
    return spec.normalize(out)


# ---------------------------------------------------------------------------
# Gaussian mixtures (analytic oracle)
# ---------------------------------------------------------------------------

@dataclass
class GaussianMixture:
    weights: np.ndarray   # (K,), positive, sums to 1
    means: np.ndarray     # (K, 2)
    covs: np.ndarray      # (K, 2, 2), symmetric positive-definite

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        self.covs = np.asarray(self.covs, dtype=float).reshape(-1, 2, 2)
        k = len(self.weights)
        if self.means.shape[0] != k or self.covs.shape[0] != k or k == 0:
            raise ConfigError("mixture needs matching, nonempty weights/means/covs")
        if np.any(self.weights <= 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ConfigError("mixture weights must be positive and sum to 1")
        for c in self.covs:
            if not np.allclose(c, c.T):
                raise ConfigError("covariances must be symmetric")
            if np.any(np.linalg.eigvalsh(c) <= 0):
                raise ConfigError("covariances must be positive-definite")

    @property
    def mean(self):
        return self.weights @ self.means


def gmm_sample(gmm: GaussianMixture, stream: RngStream, n: int) -> np.ndarray:
    """Ancestral sampling; consumes 1 uniform (component) + 2 gaussians per point."""
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    cum = np.cumsum(gmm.weights)
    comp = np.searchsorted(cum, stream.uniforms(n), side="right")
    np.clip(comp, 0, len(gmm.weights) - 1, out=comp)
    z = stream.gaussian(2 * n).reshape(n, 2)
    chols = np.linalg.cholesky(gmm.covs)
    return gmm.means[comp] + np.einsum("nij,nj->ni", chols[comp], z)


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise DomainError("sigma must be positive and finite")
    return sigma


def _posterior_terms(gmm, x, sigma):
    """Log responsibilities and per-component posterior means for the noised
    marginal; all math in log space for stability at extreme sigma."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    b = x.shape[0]
    sigma = np.broadcast_to(_check_sigma(sigma), (b,))
    k = len(gmm.weights)
    infl = gmm.covs[None, :, :, :] + (sigma**2)[:, None, None, None] * np.eye(2)
    diff = x[:, None, :] - gmm.means[None, :, :]           # (B, K, 2)
    inv = np.linalg.inv(infl)                               # (B, K, 2, 2)
    sol = np.einsum("bkij,bkj->bki", inv, diff)             # inv(P) (x - mu)
    quad = np.einsum("bki,bki->bk", diff, sol)
    _, logdet = np.linalg.slogdet(infl)
    logn = -np.log(2 * np.pi) - 0.5 * logdet - 0.5 * quad
    logr = np.log(gmm.weights)[None, :] + logn
    logr = logr - logr.max(axis=1, keepdims=True)
    r = np.exp(logr)
    r /= r.sum(axis=1, keepdims=True)
    post_means = gmm.means[None, :, :] + np.einsum("kij,bkj->bki", gmm.covs, sol)
    return r, post_means, sol


def gmm_denoiser(gmm: GaussianMixture, x, sigma) -> np.ndarray:
    """Exact posterior mean E[x0 | x_sigma = x] for x_sigma = x0 + sigma * n."""
    single = np.asarray(x).ndim == 1
    r, post_means, _ = _posterior_terms(gmm, x, sigma)
    d = np.einsum("bk,bki->bi", r, post_means)
    return d[0] if single else d


def gmm_score(gmm: GaussianMixture, x, sigma) -> np.ndarray:
    """Exact gradient of log p(x_sigma; sigma): the noised-mixture score."""
    single = np.asarray(x).ndim == 1
    r, _, sol = _posterior_terms(gmm, x, sigma)
    s = -np.einsum("bk,bki->bi", r, sol)
    return s[0] if single else s


def gmm_logpdf(gmm: GaussianMixture, x, sigma) -> np.ndarray:
    """Log density of the noised marginal (mixture with inflated covariances)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    b = x.shape[0]
    sigma = np.broadcast_to(_check_sigma(sigma), (b,))
    infl = gmm.covs[None, :, :, :] + (sigma**2)[:, None, None, None] * np.eye(2)
    diff = x[:, None, :] - gmm.means[None, :, :]
    inv = np.linalg.inv(infl)
    quad = np.einsum("bki,bkij,bkj->bk", diff, inv, diff)
    _, logdet = np.linalg.slogdet(infl)
    logn = -np.log(2 * np.pi) - 0.5 * logdet - 0.5 * quad
    terms = np.log(gmm.weights)[None, :] + logn
    m = terms.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(terms - m).sum(axis=1, keepdims=True))).ravel()
