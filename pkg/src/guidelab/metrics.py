"""Quantitative readouts against a ground-truth reference set.

- outlier_rate: fraction of samples whose exact nearest-neighbor distance to
  the reference exceeds a threshold (uniform-grid spatial index, exact).
- coverage: fraction of reference-occupied histogram cells hit by at least
  one sample (diversity proxy).
- hist_kl: KL(reference || samples) over a 2D histogram with add-one
  smoothing (overall-fit scalar).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MetricError


@dataclass
class Grid:
    bins: int
    lo: np.ndarray  # (2,)
    hi: np.ndarray  # (2,)

    def validate(self):
        if self.bins < 1:
            raise ConfigError("grid needs at least one bin per axis")
        if np.any(self.hi <= self.lo):
            raise ConfigError("degenerate grid: hi must exceed lo on both axes")
        return self


def reference_grid(reference, bins=64, pad=0.1) -> Grid:
    """Grid over the reference bounding box expanded by `pad` on each side."""
    reference = np.asarray(reference, dtype=float)
    lo = reference.min(axis=0)
    hi = reference.max(axis=0)
    span = hi - lo
    return Grid(bins=bins, lo=lo - pad * span, hi=hi + pad * span).validate()


def _hist(points, grid: Grid):
    h, _, _ = np.histogram2d(
        points[:, 0],
        points[:, 1],
        bins=grid.bins,
        range=[(grid.lo[0], grid.hi[0]), (grid.lo[1], grid.hi[1])],
    )
    return h


class GridIndex:
    """Uniform-grid spatial index for exact nearest-neighbor distances."""

    def __init__(self, points, cell=None):
        self.points = np.asarray(points, dtype=float)
        if len(self.points) == 0:
            raise MetricError("cannot index an empty point set")
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        if cell is None:
            area = max(np.prod(hi - lo), 1e-12)
            cell = np.sqrt(2.0 * area / len(self.points))
        self.cell = float(cell)
        self.origin = lo
        keys = np.floor((self.points - self.origin) / self.cell).astype(np.int64)
        order = np.lexsort((keys[:, 1], keys[:, 0]))
        sorted_keys = keys[order]
        change = np.flatnonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)) + 1
        starts = np.concatenate([[0], change, [len(order)]])
        self._cells = {
            tuple(sorted_keys[starts[i]]): order[starts[i] : starts[i + 1]]
            for i in range(len(starts) - 1)
        }
        self._key_lo = keys.min(axis=0)
        self._key_hi = keys.max(axis=0)

    def _ring_indices(self, cx, cy, r):
        cells = self._cells
        klo, khi = self._key_lo, self._key_hi
        if r == 0:
            hit = cells.get((cx, cy))
            return [hit] if hit is not None else []
        out = []
        xlo = max(cx - r, klo[0])
        xhi = min(cx + r, khi[0])
        for dy in (-r, r):
            y = cy + dy
            if klo[1] <= y <= khi[1]:
                for x in range(xlo, xhi + 1):
                    hit = cells.get((x, y))
                    if hit is not None:
                        out.append(hit)
        ylo = max(cy - r + 1, klo[1])
        yhi = min(cy + r - 1, khi[1])
        for dx in (-r, r):
            x = cx + dx
            if klo[0] <= x <= khi[0]:
                for y in range(ylo, yhi + 1):
                    hit = cells.get((x, y))
                    if hit is not None:
                        out.append(hit)
        return out

    def nn_dist(self, queries, exclude=None):
        """Exact nearest-neighbor distance per query point.

        `exclude`: optional per-query index into the indexed set to ignore
        (for self-distance calibration).
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        pts = self.points
        cell = self.cell
        out = np.empty(len(queries))
        for qi, q in enumerate(queries):
            cx, cy = int(np.floor((q[0] - self.origin[0]) / cell)), int(
                np.floor((q[1] - self.origin[1]) / cell)
            )
            # queries well outside the occupied box would touch almost every
            # cell before the ring bound closes; a vectorized scan is cheaper
            outside = max(
                0,
                self._key_lo[0] - cx,
                cx - self._key_hi[0],
                self._key_lo[1] - cy,
                cy - self._key_hi[1],
            )
            if outside > 2:
                d2 = np.sum((pts - q) ** 2, axis=1)
                if exclude is not None:
                    d2[exclude[qi]] = np.inf
                out[qi] = np.sqrt(np.min(d2))
                continue
            best = np.inf
            r = 0
            while True:
                for idx in self._ring_indices(cx, cy, r):
                    if exclude is not None:
                        idx = idx[idx != exclude[qi]]
                        if len(idx) == 0:
                            continue
                    d2 = np.min(np.sum((pts[idx] - q) ** 2, axis=1))
                    if d2 < best:
                        best = d2
                # anything outside the scanned block is at least (r * cell) away
                if np.sqrt(best) <= r * cell:
                    break
                r += 1
            out[qi] = np.sqrt(best)
        return out


def calibrate_tau(reference, quantile=0.999, scale=4.0, index=None):
    """Self-calibrating outlier threshold: `scale` times the given quantile of
    reference-to-reference nearest-neighbor distances.

    A point is flagged as an outlier when its gap to the data is several times
    the largest spacing found inside the data itself; the multiplier keeps the
    threshold above the fine-scale texture of the reference so the rate
    measures genuinely stray samples rather than sub-pixel sharpness."""
    reference = np.asarray(reference, dtype=float)
    if len(reference) < 2:
        raise MetricError("need at least two reference points to calibrate tau")
    index = index or GridIndex(reference)
    d = index.nn_dist(reference, exclude=np.arange(len(reference)))
    return float(scale * np.quantile(d, quantile))


def outlier_rate(samples, reference, tau_out, index=None):
    """Fraction of samples farther than tau_out from the reference set."""
    samples = np.asarray(samples, dtype=float)
    if len(samples) == 0:
        raise MetricError("outlier rate is undefined for an empty sample set")
    if tau_out <= 0:
        raise ConfigError(f"tau_out must be positive, got {tau_out}")
    index = index or GridIndex(reference)
    d = index.nn_dist(samples)
    return float(np.mean(d > tau_out))


def coverage(samples, reference, grid: Grid):
    """Fraction of reference-occupied grid cells containing >= 1 sample.

    A cell counts as occupied when it holds at least max(1, 1e-4 * |reference|)
    reference points.
    """
    grid.validate()
    samples = np.asarray(samples, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if np.any(reference.min(0) < grid.lo) or np.any(reference.max(0) > grid.hi):
        raise ConfigError("grid does not cover the reference bounding box")
    ref_h = _hist(reference, grid)
    threshold = max(1.0, 1e-4 * len(reference))
    occupied = ref_h >= threshold
    if not occupied.any():
        raise MetricError("no occupied reference cells at this grid resolution")
    sample_h = _hist(samples, grid)
    return float(np.mean(sample_h[occupied] >= 1))


def hist_kl(samples, reference, grid: Grid):
    """KL(reference || samples) over the grid, add-one smoothed counts."""
    grid.validate()
    samples = np.asarray(samples, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if len(samples) == 0 or len(reference) == 0:
        raise MetricError("histogram KL needs nonempty sample and reference sets")
    p = _hist(reference, grid) + 1.0
    q = _hist(samples, grid) + 1.0
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * (np.log(p) - np.log(q))))


@dataclass
class MetricReport:
    outlier_rate: float
    coverage: float
    hist_kl: float
    n_samples: int
    tau_out: float
    bins: int

    def validate(self):
        if not 0.0 <= self.outlier_rate <= 1.0 or not 0.0 <= self.coverage <= 1.0:
            raise MetricError("metric fractions must lie in [0, 1]")
        if self.hist_kl < 0:
            raise MetricError("histogram KL must be nonnegative")
        return self


def evaluate(samples, reference, tau_out=None, grid=None, bins=64, index=None) -> MetricReport:
    """All three metrics in one pass over a sample set."""
    samples = np.asarray(samples, dtype=float)
    reference = np.asarray(reference, dtype=float)
    index = index or GridIndex(reference)
    if tau_out is None:
        tau_out = calibrate_tau(reference, index=index)
    if grid is None:
        grid = reference_grid(reference, bins=bins)
    return MetricReport(
        outlier_rate=outlier_rate(samples, reference, tau_out, index=index),
        coverage=coverage(samples, reference, grid),
        hist_kl=hist_kl(samples, reference, grid),
        n_samples=len(samples),
        tau_out=tau_out,
        bins=grid.bins,
    ).validate()
