"""guidelab: a desk-scale laboratory for diffusion guidance on 2D data.

Compares unguided sampling, classifier-free guidance, autoguidance with a
weak checkpoint, stochastic-dropout self-guidance, and score truncation on
synthetic 2D distributions, with an analytic Gaussian-mixture oracle for
exact verification of the guidance math.
"""

from .config import RunConfig, format_config, parse_config
from .distributions import FractalSpec, GaussianMixture, default_fractal_spec
from .guidance import GuidanceSpec, GuidedDenoiser
from .net import DenoiserNet, net_init
from .sampler import SamplerConfig, sample, sigma_schedule
from .streams import RngStream
from .training import TrainConfig, train

__all__ = [
    "RunConfig",
    "format_config",
    "parse_config",
    "FractalSpec",
    "GaussianMixture",
    "default_fractal_spec",
    "GuidanceSpec",
    "GuidedDenoiser",
    "DenoiserNet",
    "net_init",
    "SamplerConfig",
    "sample",
    "sigma_schedule",
    "RngStream",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
