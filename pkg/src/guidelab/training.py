"""Denoising score-matching training of the conditional denoiser.

The loop draws classes uniformly, samples clean points from the data source,
noises them at log-normally distributed sigma, replaces the condition by the
null token with probability `cond_drop` (classifier-free guidance branch),
and takes Adam steps on the weighted denoising loss

    L = mean_i lambda(sigma_i) ||D(x_sigma_i; sigma_i, c_i) - x0_i||^2,
    lambda(sigma) = (sigma^2 + sd^2) / (sigma * sd)^2.

An early snapshot of the weights (`weak_step`) is kept as the inferior guide
model for autoguidance.  The whole run is a pure function of the config.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net as nnet
from .distributions import FractalSpec, GaussianMixture, fractal_sample, gmm_sample
from .errors import ConfigError, TrainingError
from .streams import RngStream


@dataclass
class TrainConfig:
    batch: int = 256
    steps: int = 20000
    lr: float = 1e-3
    lr_end: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sigma_mean: float = -1.2   # mean of log sigma
    sigma_std: float = 1.2     # std of log sigma
    cond_drop: float = 0.1
    p_train: float = 0.1
    weak_step: int = 2000
    hidden: tuple = nnet.DEFAULT_HIDDEN
    seed: int = 0

    def validate(self):
        if self.batch < 1 or self.steps < 1:
            raise ConfigError("batch and steps must be >= 1")
        if not 0 <= self.weak_step < self.steps:
            raise ConfigError("weak_step must satisfy 0 <= weak_step < steps")
        for name in ("cond_drop", "p_train"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if self.lr <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")
        return self


@dataclass
class SampleBatch:
    x0: np.ndarray       # (B, 2)
    noise: np.ndarray    # (B, 2)
    sigma: np.ndarray    # (B,)
    labels: np.ndarray   # (B,), class index or NULL_CLASS
    x_sigma: np.ndarray  # (B, 2) == x0 + sigma * noise

    def __len__(self):
        return len(self.x0)


def noising(x0, sigma, stream: RngStream, labels=None) -> SampleBatch:
    """Draw n ~ N(0, I) per sample and form x_sigma = x0 + sigma * n."""
    x0 = np.asarray(x0, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if x0.shape[0] != sigma.shape[0]:
        raise TrainingError(
            f"length mismatch: {x0.shape[0]} points vs {sigma.shape[0]} sigmas"
        )
    if np.any(sigma < 0):
        raise ConfigError("sigma must be nonnegative")
    b = x0.shape[0]
    if labels is None:
        labels = np.zeros(b, dtype=np.int64)
    noise = stream.gaussian(2 * b).reshape(b, 2)
    return SampleBatch(
        x0=x0,
        noise=noise,
        sigma=sigma,
        labels=np.asarray(labels, dtype=np.int64),
        x_sigma=x0 + sigma[:, None] * noise,
    )


def loss_weight(sigma, sigma_data=0.5):
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def loss_and_grad(net, batch: SampleBatch, p_train: float, stream: RngStream):
    """Weighted denoising loss and its exact parameter gradient.

    Dropout is active at `p_train` during the forward pass; masks are drawn
    from `stream` (one (B, width) mask per site, in site order) and recorded
    for the backward pass.
    """
    if len(batch) == 0:
        raise TrainingError("empty batch")
    b = len(batch)
    masks = None
    if p_train > 0:
        masks = [
            nnet.dropout_mask(stream, b * net.widths[i + 1], p_train).reshape(
                b, net.widths[i + 1]
            )
            for i in net.dropout_sites
        ]
    d, cache = nnet.forward_batch(
        net, batch.x_sigma, batch.sigma, batch.labels, masks, want_cache=True
    )
    lam = loss_weight(batch.sigma, net.sigma_data)
    err = d - batch.x0
    loss = float(np.mean(lam * np.sum(err**2, axis=1)))
    if not np.isfinite(loss):
        raise TrainingError("non-finite training loss")
    target_grad = (2.0 * lam / b)[:, None] * err
    grads = nnet.backward(net, cache, target_grad)
    return loss, grads


def denoising_loss(denoise_fn, batch: SampleBatch, sigma_data=0.5):
    """Loss of an arbitrary denoiser on a batch (no gradient); used for
    held-out evaluation and for the analytic-oracle irreducible-loss check."""
    d = denoise_fn(batch.x_sigma, batch.sigma, batch.labels)
    lam = loss_weight(batch.sigma, sigma_data)
    return float(np.mean(lam * np.sum((d - batch.x0) ** 2, axis=1)))


def sample_data(data, class_ids, stream_maker, n_per_class=None):
    """Draw clean points for an ordered class-id array, one sub-stream per class."""
    class_ids = np.asarray(class_ids, dtype=np.int64)
    out = np.empty((len(class_ids), 2))
    for c in np.unique(class_ids):
        idx = np.flatnonzero(class_ids == c)
        stream = stream_maker(int(c))
        if isinstance(data, FractalSpec):
            out[idx] = fractal_sample(data, int(c), stream, len(idx))
        elif isinstance(data, GaussianMixture):
            out[idx] = gmm_sample(data, stream, len(idx))
        else:
            raise ConfigError(f"unsupported data source: {type(data).__name__}")
    return out


def num_classes_of(data):
    return data.num_classes if isinstance(data, FractalSpec) else 1


@dataclass
class TrainResult:
    final: "nnet.DenoiserNet"
    weak: "nnet.DenoiserNet"
    loss_trace: np.ndarray
    null_grad_steps: int = 0   # steps where the null-token embedding row got gradient


def train(config: TrainConfig, data) -> TrainResult:
    """Run the full training loop; deterministic given (config, data)."""
    config.validate()
    n_classes = num_classes_of(data)
    net = nnet.net_init(nnet.default_widths(config.hidden), n_classes, config.seed)
    params = nnet.param_list(net)
    state = nnet.adam_init(params, config.lr, config.beta1, config.beta2, config.eps)
    trace = np.empty(config.steps)
    weak = net.copy() if config.weak_step == 0 else None
    null_grad_steps = 0
    for t in range(config.steps):
        cls_stream = RngStream(config.seed, f"class/{t}")
        class_ids = cls_stream.integers(config.batch, n_classes)
        x0 = sample_data(
            data, class_ids, lambda c: RngStream(config.seed, f"data/{t}/c{c}")
        )
        log_sigma = RngStream(config.seed, f"sigma/{t}").gaussian(config.batch)
        sigma = np.exp(config.sigma_mean + config.sigma_std * log_sigma)
        drop_u = RngStream(config.seed, f"cond/{t}").uniforms(config.batch)
        labels = np.where(drop_u < config.cond_drop, nnet.NULL_CLASS, class_ids)
        batch = noising(x0, sigma, RngStream(config.seed, f"noise/{t}"), labels)
        loss, grads = loss_and_grad(
            net, batch, config.p_train, RngStream(config.seed, f"mask/{t}")
        )
        if not np.isfinite(loss) or loss > 1e6:
            raise TrainingError(f"training diverged at step {t}: loss={loss}")
        if np.any(grads[-1][n_classes] != 0.0):
            null_grad_steps += 1
        lr = config.lr_end + 0.5 * (config.lr - config.lr_end) * (
            1.0 + np.cos(np.pi * t / config.steps)
        )
        nnet.adam_step(state, params, grads, lr=lr)
        trace[t] = loss
        if t + 1 == config.weak_step:
            weak = net.copy()
    return TrainResult(final=net, weak=weak, loss_trace=trace, null_grad_steps=null_grad_steps)
