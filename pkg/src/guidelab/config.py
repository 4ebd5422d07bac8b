"""Run configuration: a flat `section.key = value` text format.

Grammar: one `key = value` assignment per line; `#` starts a comment; blank
lines ignored.  Keys are dotted paths; values are scalars, comma-separated
lists, or semicolon-separated numeric groups (mixture components, IFS maps).
Unknown keys, type mismatches, and invariant violations raise `ConfigError`
naming the key and line.  An empty file yields the all-defaults config.

Every run writes back `resolved_config.txt` via `format_config`, which
round-trips losslessly through `parse_config`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    AffineMap,
    ClassMaps,
    FractalSpec,
    GaussianMixture,
    default_fractal_spec,
)
from .errors import ConfigError
from .guidance import MODES, GuidanceSpec
from .sampler import SamplerConfig
from .training import TrainConfig

# mode-conditional defaults for guidance fields
_MODE_DEFAULTS = {
    "unguided": {},
    "cfg": {"w": "4.0"},
    "autoguide": {"w": "1.5"},
    "insitu": {"w": "2.0", "p": "0.1"},
    "truncate": {"tau": "1.0"},
}

# key -> (type tag, default string or None for "unset")
_SCHEMA = {
    "seed": ("int", "0"),
    "out_dir": ("str", "runs/out"),
    "dist.kind": ("str", "fractal"),
    "dist.warmup": ("int", "64"),
    "dist.fractal.class0": ("groups", None),
    "dist.fractal.class1": ("groups", None),
    "dist.components": ("groups", None),
    "train.batch": ("int", "256"),
    "train.steps": ("int", "20000"),
    "train.lr": ("float", "0.001"),
    "train.lr_end": ("float", "0.0001"),
    "train.beta1": ("float", "0.9"),
    "train.beta2": ("float", "0.999"),
    "train.eps": ("float", "1e-08"),
    "train.sigma_mean": ("float", "-1.2"),
    "train.sigma_std": ("float", "1.2"),
    "train.cond_drop": ("float", "0.1"),
    "train.p": ("float", "0.1"),
    "train.weak_step": ("int", "2000"),
    "train.hidden": ("int_list", "128,128,128"),
    "train.seed": ("int", None),
    "sampler.steps": ("int", "64"),
    "sampler.sigma_min": ("float", "0.002"),
    "sampler.sigma_max": ("float", "80.0"),
    "sampler.rho": ("float", "7.0"),
    "sampler.integrator": ("str", "heun"),
    "sampler.seed": ("int", None),
    "sample.n": ("int", "10000"),
    "guidance.mode": ("str", "insitu"),
    "guidance.w": ("float", None),
    "guidance.p": ("float", None),
    "guidance.tau": ("float", None),
    "guidance.weak_ckpt": ("str", None),
    "guidance.passes": ("int", "1"),
    "metrics.bins": ("int", "64"),
    "metrics.pad": ("float", "0.1"),
    "metrics.tau_out": ("float", None),
    "metrics.n_reference": ("int", "100000"),
    "sweep.w": ("float_list", "1.0,2.0,3.0"),
    "sweep.p": ("float_list", "0.05,0.1,0.15,0.2"),
    "sweep.modes": ("str_list", "insitu"),
}


def _parse_value(key, raw, lineno):
    kind = _SCHEMA[key][0]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "int_list":
            return [int(v.strip()) for v in raw.split(",") if v.strip()]
        if kind == "float_list":
            return [float(v.strip()) for v in raw.split(",") if v.strip()]
        if kind == "str_list":
            return [v.strip() for v in raw.split(",") if v.strip()]
        if kind == "groups":
            return [
                [float(v) for v in group.split()]
                for group in raw.split(";")
                if group.strip()
            ]
    except ValueError:
        pass
    raise ConfigError(f"line {lineno}: key {key!r} expects a {kind} value, got {raw!r}")


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    dist: object                     # FractalSpec or GaussianMixture
    train: TrainConfig
    sampler: SamplerConfig
    guidance: GuidanceSpec
    sample_n: int
    metric_bins: int
    metric_pad: float
    metric_tau: float
    n_reference: int
    sweep_w: list
    sweep_p: list
    sweep_modes: list
    resolved: dict = field(repr=False, default_factory=dict)

    @property
    def num_classes(self):
        from .training import num_classes_of

        return num_classes_of(self.dist)


def _build_class_maps(groups, key):
    maps, weights = [], []
    for g in groups:
        if len(g) != 7:
            raise ConfigError(
                f"key {key!r}: each map needs 7 numbers (a11 a12 a21 a22 bx by weight)"
            )
        maps.append(AffineMap(np.array(g[:4]).reshape(2, 2), np.array(g[4:6])))
        weights.append(g[6])
    return ClassMaps(maps=maps, weights=np.array(weights))


def _build_distribution(values):
    kind = values["dist.kind"]
    if kind == "fractal":
        base = default_fractal_spec()
        classes = []
        for c, default in enumerate(base.classes):
            groups = values.get(f"dist.fractal.class{c}")
            classes.append(
                _build_class_maps(groups, f"dist.fractal.class{c}") if groups else default
            )
        return FractalSpec(classes=classes, warm_up=values["dist.warmup"])
    if kind == "gmm":
        groups = values.get("dist.components")
        if not groups:
            groups = [[0.5, -1.0, 0.0, 0.05, 0.0, 0.05], [0.5, 1.0, 0.0, 0.05, 0.0, 0.05]]
        weights, means, covs = [], [], []
        for g in groups:
            if len(g) != 6:
                raise ConfigError(
                    "key 'dist.components': each component needs 6 numbers "
                    "(weight mx my cxx cxy cyy)"
                )
            weights.append(g[0])
            means.append(g[1:3])
            covs.append([[g[3], g[4]], [g[4], g[5]]])
        return GaussianMixture(np.array(weights), np.array(means), np.array(covs))
    raise ConfigError(f"dist.kind must be 'fractal' or 'gmm', got {kind!r}")


def parse_config(text: str) -> RunConfig:
    assignments = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        assignments[key] = (raw, lineno)
    return build_config(assignments)


def build_config(assignments) -> RunConfig:
    """Build and validate a RunConfig from {key: (raw string, lineno)}."""
    for key, (_, lineno) in assignments.items():
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    values, resolved = {}, {}
    mode_raw = assignments.get("guidance.mode", (_SCHEMA["guidance.mode"][1], 0))[0]
    mode_defaults = _MODE_DEFAULTS.get(mode_raw, {})
    for key, (kind, default) in _SCHEMA.items():
        if key.startswith("guidance.") and key != "guidance.mode":
            default = mode_defaults.get(key.split(".", 1)[1], default)
        if key in assignments:
            raw, lineno = assignments[key]
        elif default is not None:
            raw, lineno = default, 0
        else:
            values[key] = None
            continue
        if raw == "":
            values[key] = None
            continue
        values[key] = _parse_value(key, raw, lineno)
        resolved[key] = raw

    master = values["seed"]
    train = TrainConfig(
        batch=values["train.batch"],
        steps=values["train.steps"],
        lr=values["train.lr"],
        lr_end=values["train.lr_end"],
        beta1=values["train.beta1"],
        beta2=values["train.beta2"],
        eps=values["train.eps"],
        sigma_mean=values["train.sigma_mean"],
        sigma_std=values["train.sigma_std"],
        cond_drop=values["train.cond_drop"],
        p_train=values["train.p"],
        weak_step=values["train.weak_step"],
        hidden=tuple(values["train.hidden"]),
        seed=values["train.seed"] if values["train.seed"] is not None else master,
    ).validate()
    sampler = SamplerConfig(
        steps=values["sampler.steps"],
        sigma_min=values["sampler.sigma_min"],
        sigma_max=values["sampler.sigma_max"],
        rho=values["sampler.rho"],
        integrator=values["sampler.integrator"],
        seed=values["sampler.seed"] if values["sampler.seed"] is not None else master,
    ).validate()
    if values["guidance.mode"] not in MODES:
        raise ConfigError(
            f"key 'guidance.mode': must be one of {MODES}, got {values['guidance.mode']!r}"
        )
    if values["guidance.p"] is not None and not 0.0 <= values["guidance.p"] < 1.0:
        raise ConfigError(
            f"key 'guidance.p': dropout probability must be in [0, 1), got {values['guidance.p']}"
        )
    guidance = GuidanceSpec(
        mode=values["guidance.mode"],
        w=values["guidance.w"],
        p=values["guidance.p"],
        tau=values["guidance.tau"],
        weak_ckpt=values["guidance.weak_ckpt"],
        insitu_passes=values["guidance.passes"],
    ).validate()
    if values["sample.n"] < 1:
        raise ConfigError("key 'sample.n': must be >= 1")
    if values["metrics.tau_out"] is not None and values["metrics.tau_out"] <= 0:
        raise ConfigError("key 'metrics.tau_out': must be positive")
    for k in ("sweep.w", "sweep.p", "sweep.modes"):
        if not values[k]:
            raise ConfigError(f"key {k!r}: sweep grid must be nonempty")
    for m in values["sweep.modes"]:
        if m not in MODES:
            raise ConfigError(f"key 'sweep.modes': unknown mode {m!r}")
    resolved.setdefault("train.seed", str(train.seed))
    resolved.setdefault("sampler.seed", str(sampler.seed))
    return RunConfig(
        seed=master,
        out_dir=values["out_dir"],
        dist=_build_distribution(values),
        train=train,
        sampler=sampler,
        guidance=guidance,
        sample_n=values["sample.n"],
        metric_bins=values["metrics.bins"],
        metric_pad=values["metrics.pad"],
        metric_tau=values["metrics.tau_out"],
        n_reference=values["metrics.n_reference"],
        sweep_w=values["sweep.w"],
        sweep_p=values["sweep.p"],
        sweep_modes=values["sweep.modes"],
        resolved=resolved,
    )


def format_config(cfg: RunConfig) -> str:
    """Serialize the fully resolved configuration; parse(format(cfg)) is
    equivalent to cfg."""
    lines = ["# resolved guidelab configuration"]
    for key in _SCHEMA:
        if key in cfg.resolved:
            lines.append(f"{key} = {cfg.resolved[key]}")
    return "\n".join(lines) + "\n"
