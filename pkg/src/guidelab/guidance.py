"""The guidance algebra.

All modes share one extrapolation rule: a "good" prediction is pushed away
from a "bad" one,

    out = D_good + w * (D_good - D_bad),

and differ only in where D_bad comes from: the unconditional branch (CFG), a
separately saved weak checkpoint (autoguidance), or a dropout-active
stochastic pass of the same network (in-situ).  Score truncation is the naive
baseline that clips the implied score norm instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net as nnet
from .errors import ConfigError, DomainError, UsageError
from .streams import RngStream

MODES = ("unguided", "cfg", "autoguide", "insitu", "truncate")


@dataclass
class GuidanceSpec:
    mode: str = "insitu"
    w: float = None       # cfg / autoguide / insitu
    p: float = None       # insitu only
    tau: float = None     # truncate only
    weak_ckpt: str = None  # autoguide only
    insitu_passes: int = 1

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"guidance mode must be one of {MODES}, got {self.mode!r}")
        needs_w = self.mode in ("cfg", "autoguide", "insitu")
        if needs_w and (self.w is None or self.w < 0):
            raise ConfigError(f"mode {self.mode!r} requires guidance weight w >= 0")
        if not needs_w and self.w is not None:
            raise ConfigError(f"guidance weight w is meaningless for mode {self.mode!r}")
        if self.mode == "insitu":
            if self.p is None or not 0.0 <= self.p < 1.0:
                raise ConfigError("insitu mode requires dropout probability p in [0, 1)")
            if self.insitu_passes < 1:
                raise ConfigError("insitu_passes must be >= 1")
        elif self.p is not None:
            raise ConfigError(f"dropout probability p is meaningless for mode {self.mode!r}")
        if self.mode == "truncate":
            if self.tau is None or self.tau <= 0:
                raise ConfigError("truncate mode requires threshold tau > 0")
        elif self.tau is not None:
            raise ConfigError(f"truncation threshold tau is meaningless for mode {self.mode!r}")
        if self.mode != "autoguide" and self.weak_ckpt is not None:
            raise ConfigError("weak_ckpt only applies to autoguidance")
        return self


def _check_sigma(sigma):
    if np.any(np.asarray(sigma) <= 0):
        raise DomainError("sigma must be positive")


def score_from_denoiser(d, x, sigma):
    """Score implied by a denoiser value: (d - x) / sigma^2."""
    _check_sigma(sigma)
    d = np.asarray(d, dtype=float)
    x = np.asarray(x, dtype=float)
    s2 = np.asarray(sigma, dtype=float) ** 2
    return (d - x) / (s2[..., None] if d.ndim > 1 else s2)


def denoiser_from_score(s, x, sigma):
    """Inverse of `score_from_denoiser`: x + sigma^2 * s."""
    _check_sigma(sigma)
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    s2 = np.asarray(sigma, dtype=float) ** 2
    return x + (s2[..., None] if s.ndim > 1 else s2) * s


def guide(d_good, d_bad, w):
    return d_good + w * (d_good - d_bad)


def denoise_cfg(net, x, sigma, c, w, mode=nnet.DETERMINISTIC):
    """Classifier-free guidance: extrapolate the conditional prediction away
    from the null-token (unconditional) one."""
    if c == nnet.NULL_CLASS:
        raise UsageError("CFG requires a real class condition, not the null token")
    d1 = nnet.forward(net, x, sigma, c, mode)
    d0 = nnet.forward(net, x, sigma, nnet.NULL_CLASS, mode)
    return guide(d1, d0, w)


def check_same_architecture(a, b):
    if tuple(a.widths) != tuple(b.widths) or a.num_classes != b.num_classes:
        raise ConfigError(
            f"denoiser architectures differ: {a.widths}/{a.num_classes} classes "
            f"vs {b.widths}/{b.num_classes} classes"
        )


def denoise_autoguidance(good_net, bad_net, x, sigma, c, w):
    """Guide the strong model away from a weaker, separately saved one."""
    check_same_architecture(good_net, bad_net)
    d_good = nnet.forward(good_net, x, sigma, c)
    d_bad = nnet.forward(bad_net, x, sigma, c)
    return guide(d_good, d_bad, w)


def denoise_insitu(net, x, sigma, c, w, p, stream, passes=1):
    """In-situ autoguidance: the bad prediction is a dropout-active pass of
    the same network (mean of `passes` stochastic passes; one by default)."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    d_good = nnet.forward(net, x, sigma, c)
    if w == 0.0:
        return d_good
    d_bad = np.zeros(2)
    for _ in range(passes):
        d_bad += nnet.forward(net, x, sigma, c, nnet.Stochastic(p, stream))
    d_bad /= passes
    return guide(d_good, d_bad, w)


def truncate_score(s, sigma, tau):
    """Rescale score rows with ||s|| * sigma > tau down to norm tau / sigma."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    norms = np.linalg.norm(s, axis=1)
    limit = tau / sigma
    scale = np.where(norms > limit, limit / np.maximum(norms, 1e-300), 1.0)
    return s * scale[:, None]


def denoise_truncated(net, x, sigma, c, tau):
    """Denoiser value implied by the norm-truncated score."""
    if tau <= 0:
        raise DomainError(f"truncation threshold must be positive, got {tau}")
    _check_sigma(sigma)
    d = nnet.forward(net, x, sigma, c)
    s = score_from_denoiser(d, np.asarray(x, dtype=float), sigma)
    s_trunc = truncate_score(s, sigma, tau)[0]
    return denoiser_from_score(s_trunc, np.asarray(x, dtype=float), sigma)


class GuidedDenoiser:
    """Composed evaluation context used by the sampler.

    `primary` is either a DenoiserNet or a callable ``f(x, sigma, labels)``
    (the analytic oracle).  For in-situ guidance the dropout masks of the
    stochastic branch are derived from (seed, mask_scope, sample index, step
    index) and drawn once per ODE step: the Heun correction reuses the
    predictor's masks, so the guided denoiser is a fixed function within a
    step.
    """

    def __init__(self, primary, spec: GuidanceSpec, weak=None, seed=0, mask_scope=""):
        spec.validate()
        self.primary = primary
        self.spec = spec
        self.weak = weak
        self.seed = seed
        self.mask_scope = mask_scope
        self._step = None
        self._indices = None
        self._masks = None
        if spec.mode == "autoguide":
            if weak is None:
                raise UsageError("autoguidance requires a weak checkpoint")
            if isinstance(primary, nnet.DenoiserNet):
                check_same_architecture(primary, weak)
        if spec.mode == "insitu" and not isinstance(primary, nnet.DenoiserNet):
            raise UsageError("in-situ guidance requires a network denoiser")

    def begin_step(self, step_index, sample_indices=None):
        """Announce a new ODE step; invalidates cached stochastic masks."""
        self._step = int(step_index)
        if sample_indices is not None:
            self._indices = np.asarray(sample_indices, dtype=np.int64)
        self._masks = None

    def _eval(self, x, sigma, labels, masks=None):
        if isinstance(self.primary, nnet.DenoiserNet):
            return nnet.forward_batch(self.primary, x, sigma, labels, masks)
        if masks is not None:
            raise UsageError("stochastic evaluation needs a network denoiser")
        return self.primary(x, sigma, labels)

    def _step_masks(self, b):
        """One mask set per stochastic pass, each: one (B, width) array per
        dropout site.  Per-sample streams keyed by (sample index, step index)."""
        if self._masks is not None:
            return self._masks
        net = self.primary
        p = self.spec.p
        indices = self._indices if self._indices is not None else np.arange(b)
        widths = [net.widths[i + 1] for i in net.dropout_sites]
        mask_sets = [
            [np.empty((b, w)) for w in widths] for _ in range(self.spec.insitu_passes)
        ]
        for row, idx in enumerate(indices):
            stream = RngStream(self.seed, f"m/{self.mask_scope}/{idx}/{self._step}")
            for masks in mask_sets:
                for site, w in enumerate(widths):
                    masks[site][row] = nnet.dropout_mask(stream, w, p)
        self._masks = mask_sets
        return mask_sets

    def denoise(self, x, sigma, labels):
        """Guided denoiser value for a batch at one (scalar) noise level."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = x.shape[0]
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (b,))
        spec = self.spec
        if spec.mode == "unguided":
            return self._eval(x, sigma, labels)
        if spec.mode == "cfg":
            if np.any(labels == nnet.NULL_CLASS):
                raise UsageError("CFG requires a real class condition")
            d1 = self._eval(x, sigma, labels)
            d0 = self._eval(x, sigma, np.full(b, nnet.NULL_CLASS))
            return guide(d1, d0, spec.w)
        if spec.mode == "autoguide":
            d_good = self._eval(x, sigma, labels)
            if isinstance(self.weak, nnet.DenoiserNet):
                d_bad = nnet.forward_batch(self.weak, x, sigma, labels)
            else:
                d_bad = self.weak(x, sigma, labels)
            return guide(d_good, d_bad, spec.w)
        if spec.mode == "insitu":
            d_good = self._eval(x, sigma, labels)
            if spec.w == 0.0:
                return d_good
            mask_sets = self._step_masks(b)
            d_bad = np.mean(
                [self._eval(x, sigma, labels, masks) for masks in mask_sets], axis=0
            )
            return guide(d_good, d_bad, spec.w)
        if spec.mode == "truncate":
            d = self._eval(x, sigma, labels)
            s = truncate_score(score_from_denoiser(d, x, sigma), sigma, spec.tau)
            return denoiser_from_score(s, x, sigma)
        raise ConfigError(f"unknown guidance mode {spec.mode!r}")
