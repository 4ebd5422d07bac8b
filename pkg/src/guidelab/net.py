"""Conditional denoiser MLP with hand-derived backpropagation.

The network predicts the clean point x0 from a noisy input x at noise level
sigma under a class condition c (or the null token).  Input features are
``[c_in(sigma) * x  ||  Fourier features of log sigma  ||  class embedding]``
followed by three SiLU hidden layers of width 128 and a linear head.  The raw
output is combined with a skip path,

    D = c_skip(sigma) * x + c_out(sigma) * raw,

with c_skip = sd^2/(sigma^2+sd^2), c_out = sigma*sd/sqrt(sigma^2+sd^2),
c_in = 1/sqrt(sigma^2+sd^2) and data std sd = 0.5.

Dropout sites sit after each hidden activation and use the inverted
convention (kept activations scaled by 1/(1-p)), so a stochastic pass is an
unbiased degradation of the deterministic one at every affine layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, TrainingError
from .streams import RngStream

SIGMA_EMBED_DIM = 16
CLASS_EMBED_DIM = 8
SIGMA_FREQS = np.geomspace(0.25, 4.0, SIGMA_EMBED_DIM // 2)
DEFAULT_HIDDEN = (128, 128, 128)
NULL_CLASS = -1


def default_widths(hidden=DEFAULT_HIDDEN):
    return (2 + SIGMA_EMBED_DIM + CLASS_EMBED_DIM, *hidden, 2)


class Deterministic:
    """Evaluation mode: dropout off, pure function of the inputs."""

    def __repr__(self):
        return "Deterministic()"


DETERMINISTIC = Deterministic()


@dataclass
class Stochastic:
    """Evaluation mode: dropout active at rate p, masks drawn from `stream`."""

    p: float
    stream: RngStream

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise DomainError(f"dropout probability must be in [0, 1), got {self.p}")


@dataclass
class DenoiserNet:
    widths: tuple
    num_classes: int
    weights: list          # weights[i]: (widths[i], widths[i+1])
    biases: list
    embed: np.ndarray      # (num_classes + 1, CLASS_EMBED_DIM); last row = null token
    sigma_freqs: np.ndarray = field(default_factory=lambda: SIGMA_FREQS.copy())
    sigma_data: float = 0.5
    dropout_sites: tuple = (0, 1, 2)

    @property
    def n_hidden(self):
        return len(self.widths) - 2

    def copy(self):
        return DenoiserNet(
            widths=tuple(self.widths),
            num_classes=self.num_classes,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            embed=self.embed.copy(),
            sigma_freqs=self.sigma_freqs.copy(),
            sigma_data=self.sigma_data,
            dropout_sites=tuple(self.dropout_sites),
        )


def net_init(widths, num_classes, seed) -> DenoiserNet:
    """Fresh network; weights ~ N(0, 1/fan_in), biases zero, embeddings N(0, 1)."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ConfigError("need at least an input and an output layer")
    if widths[0] != 2 + SIGMA_EMBED_DIM + CLASS_EMBED_DIM:
        raise ConfigError(
            f"input width must be {2 + SIGMA_EMBED_DIM + CLASS_EMBED_DIM}, got {widths[0]}"
        )
    if widths[-1] != 2:
        raise ConfigError(f"output width must be 2, got {widths[-1]}")
    if num_classes < 1:
        raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
    weights, biases = [], []
    for i in range(len(widths) - 1):
        stream = RngStream(seed, f"init/W{i}")
        fan_in = widths[i]
        w = stream.gaussian(widths[i] * widths[i + 1]).reshape(widths[i], widths[i + 1])
        weights.append(w / np.sqrt(fan_in))
        biases.append(np.zeros(widths[i + 1]))
    embed = (
        RngStream(seed, "init/embed")
        .gaussian((num_classes + 1) * CLASS_EMBED_DIM)
        .reshape(num_classes + 1, CLASS_EMBED_DIM)
    )
    n_hidden = len(widths) - 2
    return DenoiserNet(
        widths=widths,
        num_classes=num_classes,
        weights=weights,
        biases=biases,
        embed=embed,
        dropout_sites=tuple(range(n_hidden)),
    )


def dropout_mask(stream: RngStream, n: int, p: float) -> np.ndarray:
    """Inverted-dropout mask: each entry 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    u = stream.uniforms(n)
    return np.where(u < p, 0.0, 1.0 / (1.0 - p))


def _sigmoid(h):
    out = np.empty_like(h)
    pos = h >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-h[pos]))
    e = np.exp(h[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _silu(h, s):
    return h * s


def _silu_prime(h, s):
    return s * (1.0 + h * (1.0 - s))


def _check_inputs(net, sigma, labels):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise DomainError("sigma must be positive and finite")
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < NULL_CLASS) or np.any(labels >= net.num_classes):
        raise DomainError(
            f"class labels must be in [0, {net.num_classes}) or {NULL_CLASS} (null token)"
        )
    return sigma, labels


def features(net, x, sigma, labels):
    """Assemble the input feature matrix for a batch."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    b = x.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (b,))
    sd = net.sigma_data
    c_in = 1.0 / np.sqrt(sigma**2 + sd**2)
    ang = np.outer(np.log(sigma), net.sigma_freqs)
    rows = np.where(labels == NULL_CLASS, net.num_classes, labels)
    return np.concatenate(
        [c_in[:, None] * x, np.sin(ang), np.cos(ang), net.embed[rows]], axis=1
    ), rows


def forward_batch(net, x, sigma, labels, masks=None, want_cache=False):
    """Batched forward pass.

    `masks`: None for the deterministic path, else one (B, width) inverted
    dropout mask per dropout site, applied after the site's activation.
    Returns D (B, 2), and the activation cache when `want_cache`.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    b = x.shape[0]
    sigma, labels = _check_inputs(net, sigma, np.broadcast_to(labels, (b,)))
    sigma = np.broadcast_to(sigma, (b,))
    feat, rows = features(net, x, sigma, labels)
    sd = net.sigma_data
    c_skip = sd**2 / (sigma**2 + sd**2)
    c_out = sigma * sd / np.sqrt(sigma**2 + sd**2)

    z = feat
    hs, sigs, acts = [], [], []
    for i in range(net.n_hidden):
        h = z @ net.weights[i] + net.biases[i]
        s = _sigmoid(h)
        a = _silu(h, s)
        if masks is not None and i in net.dropout_sites:
            a = a * masks[net.dropout_sites.index(i)]
        hs.append(h)
        sigs.append(s)
        acts.append(a)
        z = a
    raw = z @ net.weights[-1] + net.biases[-1]
    d = c_skip[:, None] * x + c_out[:, None] * raw
    if not want_cache:
        return d
    cache = {
        "feat": feat,
        "rows": rows,
        "hs": hs,
        "sigs": sigs,
        "acts": acts,
        "masks": masks,
        "c_out": c_out,
    }
    return d, cache


def forward(net, x, sigma, c, mode=DETERMINISTIC):
    """Single-point denoiser evaluation D(x; sigma, c) under an EvalMode.

    Stochastic mode draws one mask per dropout site from the mode's stream,
    in site order, consuming `width` uniforms per site.
    """
    masks = None
    if isinstance(mode, Stochastic):
        masks = [
            dropout_mask(mode.stream, net.widths[i + 1], mode.p)[None, :]
            for i in net.dropout_sites
        ]
    elif not isinstance(mode, Deterministic):
        raise DomainError(f"unknown evaluation mode: {mode!r}")
    d = forward_batch(net, np.asarray(x, dtype=float)[None, :], sigma, [c], masks)
    return d[0]


def backward(net, cache, target_grad):
    """Exact reverse-mode gradient of sum_i target_grad[i] . D[i] wrt params.

    Returns gradients as a flat list in `param_list` order.  `cache` must come
    from the `forward_batch` call being differentiated (masks included when
    dropout was active).
    """
    target_grad = np.asarray(target_grad, dtype=float)
    if target_grad.shape != (cache["feat"].shape[0], 2):
        raise TrainingError(
            f"target gradient shape {target_grad.shape} does not match batch"
        )
    g = target_grad * cache["c_out"][:, None]
    gw = [None] * (net.n_hidden + 1)
    gb = [None] * (net.n_hidden + 1)
    gw[-1] = cache["acts"][-1].T @ g
    gb[-1] = g.sum(axis=0)
    g = g @ net.weights[-1].T
    for i in reversed(range(net.n_hidden)):
        if cache["masks"] is not None and i in net.dropout_sites:
            g = g * cache["masks"][net.dropout_sites.index(i)]
        g = g * _silu_prime(cache["hs"][i], cache["sigs"][i])
        z_prev = cache["feat"] if i == 0 else cache["acts"][i - 1]
        gw[i] = z_prev.T @ g
        gb[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
    g_embed = np.zeros_like(net.embed)
    np.add.at(g_embed, cache["rows"], g[:, 2 + SIGMA_EMBED_DIM :])
    out = []
    for w, b in zip(gw, gb):
        out.extend([w, b])
    out.append(g_embed)
    return out


def param_list(net):
    """Canonical flat parameter order: W0, b0, W1, b1, ..., embed."""
    out = []
    for w, b in zip(net.weights, net.biases):
        out.extend([w, b])
    out.append(net.embed)
    return out


@dataclass
class AdamState:
    step: int
    m: list
    v: list
    lr: float
    beta1: float
    beta2: float
    eps: float


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(state: AdamState, params, grads, lr=None):
    """One bias-corrected Adam update, in place on `params`; returns state."""
    if lr is None:
        lr = state.lr
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient passed to the optimizer")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return state
