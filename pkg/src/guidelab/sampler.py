"""Probability-flow ODE generation.

The ODE dx/dsigma = (x - D(x; sigma)) / sigma is integrated deterministically
from sigma_max down to sigma_min on the standard curved schedule

    sigma_i = (sigma_max^(1/rho) + i/(N-1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho,

with Euler or Heun steps, then one final Euler step to sigma = 0 using the
sigma_min slope (the network is never evaluated at sigma = 0).  Initial noise
and in-situ dropout masks are derived per sample index, so output is
independent of any batching or worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SamplingError
from .guidance import GuidedDenoiser
from .streams import RngStream

_CHUNK = 256  # fixed evaluation chunk; keeps float results identical across workers


@dataclass
class SamplerConfig:
    steps: int = 64
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    integrator: str = "heun"
    seed: int = 0

    def validate(self):
        if self.steps < 2:
            raise ConfigError("sampler needs at least 2 steps")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if self.integrator not in ("euler", "heun"):
            raise ConfigError(f"integrator must be euler or heun, got {self.integrator!r}")
        return self


def sigma_schedule(cfg: SamplerConfig) -> np.ndarray:
    """Strictly decreasing noise levels from sigma_max to sigma_min."""
    cfg.validate()
    i = np.arange(cfg.steps)
    inv = 1.0 / cfg.rho
    levels = (
        cfg.sigma_max**inv + i / (cfg.steps - 1) * (cfg.sigma_min**inv - cfg.sigma_max**inv)
    ) ** cfg.rho
    levels[0] = cfg.sigma_max
    levels[-1] = cfg.sigma_min
    return levels


def ode_step(gd: GuidedDenoiser, x, labels, sigma_from, sigma_to, integrator="heun"):
    """One integrator step from sigma_from down to sigma_to (>= 0).

    Heun applies the trapezoidal correction except when sigma_to == 0, where
    the slope is undefined and the Euler predictor is returned.
    """
    if not sigma_from > sigma_to or sigma_from <= 0 or sigma_to < 0:
        if sigma_from == sigma_to:
            return np.array(x, dtype=float, copy=True)
        raise ConfigError(f"need sigma_from > sigma_to >= 0, got {sigma_from} -> {sigma_to}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h = sigma_to - sigma_from
    d = gd.denoise(x, sigma_from, labels)
    slope = (x - d) / sigma_from
    x_euler = x + h * slope
    if integrator == "euler" or sigma_to == 0.0:
        out = x_euler
    else:
        d2 = gd.denoise(x_euler, sigma_to, labels)
        slope2 = (x_euler - d2) / sigma_to
        out = x + h * 0.5 * (slope + slope2)
    if not np.all(np.isfinite(out)):
        raise SamplingError(
            f"non-finite state integrating sigma {sigma_from:g} -> {sigma_to:g}"
        )
    return out


def _integrate(gd, x, labels, indices, levels, integrator):
    for j in range(len(levels) - 1):
        gd.begin_step(j, indices)
        try:
            x = ode_step(gd, x, labels, levels[j], levels[j + 1], integrator)
        except SamplingError as exc:
            raise SamplingError(f"{exc} (samples {indices[0]}..{indices[-1]})") from exc
    # terminal Euler step to sigma = 0 using the sigma_min slope
    gd.begin_step(len(levels) - 1, indices)
    return ode_step(gd, x, labels, levels[-1], 0.0, "euler")


def sample(gd: GuidedDenoiser, cfg: SamplerConfig, class_id: int, n: int, workers=1):
    """Generate n terminal points for one class.

    Per-sample initial noise comes from streams labeled by (class, index), and
    evaluation always runs in fixed chunks of 256, so the result is a pure
    function of (gd, cfg, class_id, n) regardless of `workers`.
    """
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    cfg.validate()
    gd.mask_scope = f"c{class_id}"
    levels = sigma_schedule(cfg)
    x0 = np.empty((n, 2))
    for i in range(n):
        z = RngStream(cfg.seed, f"init/c{class_id}/{i}").gaussian(2)
        x0[i] = cfg.sigma_max * z
    out = np.empty((n, 2))
    for start in range(0, n, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, n))
        labels = np.full(len(idx), class_id, dtype=np.int64)
        out[idx] = _integrate(gd, x0[idx], labels, idx, levels, cfg.integrator)
    return out
