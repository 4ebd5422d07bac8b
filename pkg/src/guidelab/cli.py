"""Command-line entry point.

Commands: train, sample, eval, sweep, fig2, oracle-check.  Every command
reads the config file (all keys optional), applies flag overrides one-to-one
onto config keys, runs, and writes its outputs plus a fully resolved config
copy into the output directory.  Exit code 0 means every requested output was
written and every in-command check passed.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as exp
from . import metrics as met
from . import storage
from .config import RunConfig, build_config, format_config
from .errors import ConfigError, GuidelabError, UsageError
from .guidance import GuidanceSpec
from .storage import CheckpointMeta, load_checkpoint, save_checkpoint
from .training import train

_FLAG_KEYS = (
    ("seed", "seed"),
    ("out", "out_dir"),
    ("mode", "guidance.mode"),
    ("w", "guidance.w"),
    ("p", "guidance.p"),
    ("tau", "guidance.tau"),
    ("weak_ckpt", "guidance.weak_ckpt"),
    ("n", "sample.n"),
)


def _load_config(args) -> RunConfig:
    assignments = {}
    if args.config:
        for lineno, line in enumerate(Path(args.config).read_text().splitlines(), start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, raw = (p.strip() for p in body.split("=", 1))
            assignments[key] = (raw, lineno)
    for flag, key in _FLAG_KEYS:
        value = getattr(args, flag, None)
        if value is not None:
            assignments[key] = (str(value), 0)
    return build_config(assignments)


def _write_resolved(cfg: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.txt").write_text(format_config(cfg))


def _lr_at(tc, t):
    return tc.lr_end + 0.5 * (tc.lr - tc.lr_end) * (1.0 + np.cos(np.pi * t / tc.steps))


def cmd_train(cfg: RunConfig, out_dir: Path) -> int:
    _write_resolved(cfg, out_dir)
    result = train(cfg.train, cfg.dist)
    save_checkpoint(
        result.final,
        CheckpointMeta(cfg.train.steps, cfg.train.seed, cfg.train.p_train),
        out_dir / "final.ckpt",
    )
    save_checkpoint(
        result.weak,
        CheckpointMeta(cfg.train.weak_step, cfg.train.seed, cfg.train.p_train),
        out_dir / "weak.ckpt",
    )
    storage.write_csv(
        out_dir / "loss.csv",
        storage.LOSS_HEADER,
        [(t, float(l), float(_lr_at(cfg.train, t))) for t, l in enumerate(result.loss_trace)],
    )
    print(f"wrote {out_dir}/final.ckpt, weak.ckpt, loss.csv")
    return 0


def _load_nets(cfg: RunConfig, out_dir: Path, ckpt=None, need_weak=False):
    ckpt_path = Path(ckpt) if ckpt else out_dir / "final.ckpt"
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path} (run `guidelab train` first)")
    net, _ = load_checkpoint(ckpt_path, expect_num_classes=cfg.num_classes)
    weak = None
    if need_weak:
        weak_path = (
            Path(cfg.guidance.weak_ckpt) if cfg.guidance.weak_ckpt else out_dir / "weak.ckpt"
        )
        if not weak_path.exists():
            raise UsageError(f"autoguidance requires a weak checkpoint; missing {weak_path}")
        weak, _ = load_checkpoint(weak_path, expect_num_classes=cfg.num_classes)
    return net, weak


def cmd_sample(cfg: RunConfig, out_dir: Path, args) -> int:
    _write_resolved(cfg, out_dir)
    net, weak = _load_nets(
        cfg, out_dir, ckpt=args.ckpt, need_weak=cfg.guidance.mode == "autoguide"
    )
    pts, labels = exp.run_sampling(cfg, net, cfg.guidance, weak=weak, workers=args.workers)
    out_path = out_dir / f"samples_{cfg.guidance.mode}.csv"
    storage.write_points(out_path, pts, labels)
    if args.svg:
        bbox = (pts.min(0) - 0.1, pts.max(0) + 0.1)
        storage.emit_scatter_svg(
            [(cfg.guidance.mode, pts, labels)], out_dir / f"samples_{cfg.guidance.mode}.svg", bbox
        )
    print(f"wrote {out_path}")
    return 0


def _metric_row(label, spec, report):
    return (
        label,
        spec.mode if spec else "",
        "" if spec is None or spec.w is None else float(spec.w),
        "" if spec is None or spec.p is None else float(spec.p),
        report.n_samples,
        report.outlier_rate,
        report.coverage,
        report.hist_kl,
        report.tau_out,
        report.bins,
    )


def cmd_eval(cfg: RunConfig, out_dir: Path, args) -> int:
    _write_resolved(cfg, out_dir)
    reference, _ = exp.reference_set(cfg)
    index = met.GridIndex(reference)
    grid = met.reference_grid(reference, bins=cfg.metric_bins, pad=cfg.metric_pad)
    tau = cfg.metric_tau if cfg.metric_tau is not None else met.calibrate_tau(reference, index=index)
    rows = []
    for path in args.samples:
        if not Path(path).exists():
            raise UsageError(f"samples file not found: {path}")
        pts, _ = storage.read_points(path)
        report = met.evaluate(pts, reference, tau_out=tau, grid=grid, index=index)
        rows.append(_metric_row(Path(path).stem, None, report))
    storage.write_csv(out_dir / "metrics.csv", storage.METRICS_HEADER, rows)
    print(f"wrote {out_dir}/metrics.csv ({len(rows)} rows)")
    return 0


def _sweep_grid(cfg: RunConfig):
    points = []
    for mode in cfg.sweep_modes:
        if mode == "unguided":
            points.append(GuidanceSpec(mode=mode).validate())
            continue
        if mode == "truncate":
            # the sweep value axis doubles as the truncation threshold
            points.extend(GuidanceSpec(mode=mode, tau=w).validate() for w in cfg.sweep_w)
            continue
        ps = cfg.sweep_p if mode == "insitu" else [None]
        for w in cfg.sweep_w:
            for p in ps:
                points.append(GuidanceSpec(mode=mode, w=w, p=p).validate())
    return points


def cmd_sweep(cfg: RunConfig, out_dir: Path, args) -> int:
    _write_resolved(cfg, out_dir)
    grid = _sweep_grid(cfg)
    need_weak = any(s.mode == "autoguide" for s in grid)
    net, weak = _load_nets(cfg, out_dir, ckpt=args.ckpt, need_weak=need_weak)
    reference, _ = exp.reference_set(cfg)
    index = met.GridIndex(reference)
    mgrid = met.reference_grid(reference, bins=cfg.metric_bins, pad=cfg.metric_pad)
    tau = cfg.metric_tau if cfg.metric_tau is not None else met.calibrate_tau(reference, index=index)
    rows = []
    failures = 0
    for gi, spec in enumerate(grid):
        try:
            seed = exp.derived_seed(cfg.sampler.seed, f"sweep/{gi}")
            pts, _ = exp.run_sampling(cfg, net, spec, weak=weak, seed=seed, workers=args.workers)
            report = met.evaluate(pts, reference, tau_out=tau, grid=mgrid, index=index)
            rows.append((gi,) + _metric_row(f"grid{gi}", spec, report) + ("",))
        except GuidelabError as exc:  # record the failure, keep sweeping
            failures += 1
            rows.append(
                (gi, f"grid{gi}", spec.mode, spec.w or "", spec.p or "", "", "", "", "", "", "", str(exc))
            )
    storage.write_csv(
        out_dir / "sweep.csv", ("index",) + storage.METRICS_HEADER + ("error",), rows
    )
    print(f"wrote {out_dir}/sweep.csv ({len(rows)} rows, {failures} failed)")
    return 0 if failures == 0 else 1


def cmd_fig2(cfg: RunConfig, out_dir: Path, args) -> int:
    _write_resolved(cfg, out_dir)
    if not (out_dir / "final.ckpt").exists():
        if not args.train:
            raise UsageError(
                f"no checkpoints in {out_dir}; run `guidelab train` or pass --train"
            )
        cmd_train(cfg, out_dir)
    net, _ = load_checkpoint(out_dir / "final.ckpt", expect_num_classes=cfg.num_classes)
    weak, _ = load_checkpoint(out_dir / "weak.ckpt", expect_num_classes=cfg.num_classes)
    reference, ref_labels = exp.reference_set(cfg)
    index = met.GridIndex(reference)
    grid = met.reference_grid(reference, bins=cfg.metric_bins, pad=cfg.metric_pad)
    tau = cfg.metric_tau if cfg.metric_tau is not None else met.calibrate_tau(reference, index=index)

    n_classes = cfg.num_classes
    per_class = cfg.sample_n // n_classes + (cfg.sample_n % n_classes > 0)
    keep = np.concatenate(
        [np.flatnonzero(ref_labels == c)[:per_class] for c in range(n_classes)]
    )[: cfg.sample_n]
    panels = [(exp.FIG2_PANELS[0][0], reference[keep], ref_labels[keep])]
    rows = []
    for label, spec in exp.FIG2_PANELS[1:]:
        pts, labels = exp.run_sampling(
            cfg, net, spec, weak=weak if spec.mode == "autoguide" else None, workers=args.workers
        )
        panels.append((label, pts, labels))
        report = met.evaluate(pts, reference, tau_out=tau, grid=grid, index=index)
        rows.append(_metric_row(label, spec, report))
    storage.write_csv(out_dir / "fig2_metrics.csv", storage.METRICS_HEADER, rows)
    storage.emit_scatter_svg(panels, out_dir / "fig2.svg", (grid.lo, grid.hi), cols=3)
    print(f"wrote {out_dir}/fig2.svg and fig2_metrics.csv")
    return 0


def cmd_oracle_check() -> int:
    checks = []
    t0 = time.time()
    err = exp.eq1_identity_error()
    checks.append(("score identity max rel error", f"{err:.3e}", err < 1e-10))
    orders = exp.convergence_orders()
    checks.append(("heun order", f"{orders['heun']:.2f}", 1.7 <= orders["heun"] <= 2.3))
    checks.append(("euler order", f"{orders['euler']:.2f}", 0.8 <= orders["euler"] <= 1.2))
    kl = exp.gmm_recovery_kl()
    checks.append(("mixture recovery KL (nats)", f"{kl:.4f}", kl < 0.02))
    ok = True
    for name, value, passed in checks:
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<32} {value}")
    print(f"oracle checks finished in {time.time() - t0:.1f}s")
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="guidelab",
        description="Diffusion guidance laboratory on 2D synthetic distributions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="config file path")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--workers", type=int, default=1, help="worker count (output-invariant)")

    add_common(sub.add_parser("train", help="train final + weak checkpoints"))

    p_sample = sub.add_parser("sample", help="generate samples under a guidance mode")
    add_common(p_sample)
    p_sample.add_argument("--ckpt", help="primary checkpoint (default OUT/final.ckpt)")
    p_sample.add_argument("--weak-ckpt", dest="weak_ckpt", help="weak checkpoint for autoguidance")
    p_sample.add_argument("--mode", choices=("unguided", "cfg", "autoguide", "insitu", "truncate"))
    p_sample.add_argument("--w", type=float, help="guidance weight")
    p_sample.add_argument("--p", type=float, help="in-situ dropout probability")
    p_sample.add_argument("--tau", type=float, help="score truncation threshold")
    p_sample.add_argument("--n", type=int, help="number of samples")
    p_sample.add_argument("--svg", action="store_true", help="also write a scatter SVG")

    p_eval = sub.add_parser("eval", help="compute metrics for sample CSVs")
    add_common(p_eval)
    p_eval.add_argument("--samples", nargs="+", required=True, help="sample CSV files")

    p_sweep = sub.add_parser("sweep", help="grid-sweep guidance hyperparameters")
    add_common(p_sweep)
    p_sweep.add_argument("--ckpt", help="primary checkpoint (default OUT/final.ckpt)")
    p_sweep.add_argument("--weak-ckpt", dest="weak_ckpt", help="weak checkpoint for autoguidance")

    p_fig2 = sub.add_parser("fig2", help="emit the six-panel comparison figure")
    add_common(p_fig2)
    p_fig2.add_argument("--train", action="store_true", help="train first if checkpoints are missing")

    sub.add_parser("oracle-check", help="run the analytic-oracle verification suite")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "oracle-check":
            return cmd_oracle_check()
        cfg = _load_config(args)
        out_dir = Path(cfg.out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "sample":
            return cmd_sample(cfg, out_dir, args)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir, args)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir, args)
        if args.command == "fig2":
            return cmd_fig2(cfg, out_dir, args)
        raise UsageError(f"unknown command {args.command!r}")
    except GuidelabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
