"""Binary checkpoints, CSV tables, and SVG scatter figures.

Checkpoint layout (all integers little-endian):

    bytes 0-3   magic "ISAG"
    u32         format version (currently 1)
    u32         number of layer widths, then that many u32 widths
    u32         num_classes
    u32         class embedding dim
    u32         sigma embedding dim
    u32         number of dropout sites, then that many u32 site indices
    f64         sigma_data
    u64 u64 f64 training metadata: step, seed, p_train
    u64         number of float32 parameter values
    f32 * n     parameters in canonical order (W0, b0, W1, b1, ..., embed)

Compute is 64-bit throughout the package; parameters are stored at 32-bit,
so load(save(net)) reproduces the 32-bit values exactly.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np

from . import net as nnet
from .errors import (
    ArchitectureMismatchError,
    BadMagicError,
    GuidelabError,
    TruncatedCheckpointError,
    VersionError,
)

MAGIC = b"ISAG"
VERSION = 1


@dataclass
class CheckpointMeta:
    step: int = 0
    seed: int = 0
    p_train: float = 0.0


def save_checkpoint(net: "nnet.DenoiserNet", meta: CheckpointMeta, path):
    params = nnet.param_list(net)
    blob = np.concatenate([p.astype(np.float32).ravel() for p in params])
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<I", len(net.widths)))
    out.write(struct.pack(f"<{len(net.widths)}I", *net.widths))
    out.write(struct.pack("<III", net.num_classes, nnet.CLASS_EMBED_DIM, nnet.SIGMA_EMBED_DIM))
    out.write(struct.pack("<I", len(net.dropout_sites)))
    if net.dropout_sites:
        out.write(struct.pack(f"<{len(net.dropout_sites)}I", *net.dropout_sites))
    out.write(struct.pack("<d", net.sigma_data))
    out.write(struct.pack("<QQd", meta.step, meta.seed, meta.p_train))
    out.write(struct.pack("<Q", len(blob)))
    out.write(blob.tobytes())
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def _read(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedCheckpointError(f"checkpoint ended while reading {what}")
    return data


def load_checkpoint(path, expect_num_classes=None):
    """Load a checkpoint; returns (net, meta).

    Distinct failures: BadMagicError, VersionError, TruncatedCheckpointError
    (short file or blob length inconsistent with the architecture), and
    ArchitectureMismatchError when `expect_num_classes` disagrees.
    """
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise BadMagicError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise VersionError(f"{path}: unsupported checkpoint version {version}")
        (n_widths,) = struct.unpack("<I", _read(fh, 4, "width count"))
        widths = struct.unpack(f"<{n_widths}I", _read(fh, 4 * n_widths, "widths"))
        num_classes, embed_dim, sigma_dim = struct.unpack(
            "<III", _read(fh, 12, "architecture descriptor")
        )
        (n_sites,) = struct.unpack("<I", _read(fh, 4, "dropout site count"))
        sites = (
            struct.unpack(f"<{n_sites}I", _read(fh, 4 * n_sites, "dropout sites"))
            if n_sites
            else ()
        )
        (sigma_data,) = struct.unpack("<d", _read(fh, 8, "sigma_data"))
        step, seed, p_train = struct.unpack("<QQd", _read(fh, 24, "metadata"))
        (blob_len,) = struct.unpack("<Q", _read(fh, 8, "blob length"))
        blob = np.frombuffer(_read(fh, 4 * blob_len, "parameter blob"), dtype="<f4")
    if embed_dim != nnet.CLASS_EMBED_DIM or sigma_dim != nnet.SIGMA_EMBED_DIM:
        raise ArchitectureMismatchError(
            f"{path}: embedding dims {embed_dim}/{sigma_dim} not supported"
        )
    if expect_num_classes is not None and num_classes != expect_num_classes:
        raise ArchitectureMismatchError(
            f"{path}: checkpoint has {num_classes} classes, config expects {expect_num_classes}"
        )
    expected = sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(n_widths - 1))
    expected += (num_classes + 1) * embed_dim
    if blob_len != expected:
        raise TruncatedCheckpointError(
            f"{path}: blob holds {blob_len} values, architecture needs {expected}"
        )
    weights, biases = [], []
    pos = 0
    for i in range(n_widths - 1):
        k = widths[i] * widths[i + 1]
        weights.append(blob[pos : pos + k].astype(float).reshape(widths[i], widths[i + 1]))
        pos += k
        biases.append(blob[pos : pos + widths[i + 1]].astype(float))
        pos += widths[i + 1]
    embed = blob[pos:].astype(float).reshape(num_classes + 1, embed_dim)
    net = nnet.DenoiserNet(
        widths=tuple(widths),
        num_classes=num_classes,
        weights=weights,
        biases=biases,
        embed=embed,
        sigma_data=sigma_data,
        dropout_sites=tuple(sites),
    )
    return net, CheckpointMeta(step=step, seed=seed, p_train=p_train)


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float) or isinstance(v, np.floating):
        return repr(float(v))
    return v


def read_csv(path):
    """Returns (header, rows-as-string-lists); raises with line number on
    malformed rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise GuidelabError(f"{path}: empty CSV") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise GuidelabError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            rows.append(row)
    return header, rows


LOSS_HEADER = ("step", "loss", "lr")
POINTS_HEADER = ("x", "y", "class")
METRICS_HEADER = (
    "label",
    "mode",
    "w",
    "p",
    "n_samples",
    "outlier_rate",
    "coverage",
    "hist_kl",
    "tau_out",
    "bins",
)


def write_points(path, points, labels):
    write_csv(
        path,
        POINTS_HEADER,
        [(float(x), float(y), int(c)) for (x, y), c in zip(points, labels)],
    )


def read_points(path):
    header, rows = read_csv(path)
    if tuple(header) != POINTS_HEADER:
        raise GuidelabError(f"{path}: unexpected header {header}")
    try:
        pts = np.array([[float(r[0]), float(r[1])] for r in rows])
        labels = np.array([int(r[2]) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise GuidelabError(f"{path}: malformed numeric field ({exc})") from None
    return pts.reshape(-1, 2), labels


# ---------------------------------------------------------------------------
# SVG scatter figures
# ---------------------------------------------------------------------------

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")
_PANEL = 240      # px per panel, drawing area
_MARGIN = 28
_RADIUS = 1.1


def emit_scatter_svg(panels, path, bbox, cols=3):
    """Write a deterministic multi-panel scatter SVG.

    `panels`: list of (label, points (n, 2), class labels or None).  All
    panels share the axes given by `bbox` = ((xmin, ymin), (xmax, ymax)).
    Identical inputs produce byte-identical files.
    """
    if len(panels) > 8:
        raise GuidelabError(f"at most 8 panels supported, got {len(panels)}")
    (xmin, ymin), (xmax, ymax) = bbox
    if not (xmax > xmin and ymax > ymin):
        raise GuidelabError("degenerate figure bounding box")
    cols = min(cols, max(len(panels), 1))
    rows = (len(panels) + cols - 1) // cols
    width = cols * (_PANEL + _MARGIN) + _MARGIN
    height = rows * (_PANEL + _MARGIN + 16) + _MARGIN
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    for k, (label, points, classes) in enumerate(panels):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(points) > 100_000:
            raise GuidelabError(f"panel {label!r} has more than 1e5 points")
        px = _MARGIN + (k % cols) * (_PANEL + _MARGIN)
        py = _MARGIN + (k // cols) * (_PANEL + _MARGIN + 16)
        parts.append(
            f'<rect x="{px}" y="{py}" width="{_PANEL}" height="{_PANEL}" '
            f'fill="none" stroke="#333333" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{px + _PANEL / 2:.1f}" y="{py + _PANEL + 14}" '
            f'font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>'
        )
        if classes is None:
            classes = np.zeros(len(points), dtype=np.int64)
        sx = (points[:, 0] - xmin) / (xmax - xmin)
        sy = (points[:, 1] - ymin) / (ymax - ymin)
        inside = (sx >= 0) & (sx <= 1) & (sy >= 0) & (sy <= 1)
        for (u, v, c) in zip(sx[inside], sy[inside], np.asarray(classes)[inside]):
            color = PALETTE[int(c) % len(PALETTE)]
            parts.append(
                f'<circle cx="{px + u * _PANEL:.2f}" cy="{py + (1 - v) * _PANEL:.2f}" '
                f'r="{_RADIUS}" fill="{color}" fill-opacity="0.5"/>'
            )
    parts.append("</svg>")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(parts))
        fh.write("\n")
