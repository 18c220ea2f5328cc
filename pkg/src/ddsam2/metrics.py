"""Overlap and surface-distance metrics on binary masks, in pixel units."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError

METRICS = ("dice", "nsd", "hd95", "asd")


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"mask dims differ or are not 2-D: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b):
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_map(mask):
    """Foreground pixels with a background 4-neighbour; the image border counts as background."""
    mask = np.asarray(mask, dtype=bool)
    p = np.pad(mask, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~interior


def surface(mask):
    """Boundary pixel coordinates as an [n,2] int array of (row, col), row-major order."""
    return np.argwhere(surface_map(mask))


def directed_distances(src_surface, dst_surface):
    """Distance from each src boundary pixel to the nearest dst boundary pixel."""
    pts = np.argwhere(src_surface)
    _, (iy, ix) = ndimage.distance_transform_edt(~dst_surface, return_indices=True)
    dy = (iy[pts[:, 0], pts[:, 1]] - pts[:, 0]).astype(np.float64)
    dx = (ix[pts[:, 0], pts[:, 1]] - pts[:, 1]).astype(np.float64)
    return np.sqrt(dy * dy + dx * dx)


def _surfaces(a, b):
    a, b = _pair(a, b)
    return surface_map(a), surface_map(b), math.hypot(*a.shape)


def nearest_rank(values, q=95):
    """The ceil(q/100 * n)-th smallest value (1-based)."""
    n = len(values)
    k = (q * n + 99) // 100
    return float(np.sort(values)[max(k, 1) - 1])


def hd95(a, b):
    sa, sb, diag = _surfaces(a, b)
    ea, eb = not sa.any(), not sb.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return diag
    return max(nearest_rank(directed_distances(sa, sb)), nearest_rank(directed_distances(sb, sa)))


def asd(a, b):
    sa, sb, diag = _surfaces(a, b)
    ea, eb = not sa.any(), not sb.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return diag
    both = np.concatenate([directed_distances(sa, sb), directed_distances(sb, sa)])
    return float(both.sum() / both.size)


def nsd(a, b, tau=2.0):
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    sa, sb, _ = _surfaces(a, b)
    na, nb = int(sa.sum()), int(sb.sum())
    if na + nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    hits = int((directed_distances(sa, sb) <= tau).sum()) + int((directed_distances(sb, sa) <= tau).sum())
    return hits / (na + nb)


@dataclass
class FrameMetrics:
    frame_index: int
    dice: float
    nsd: float
    hd95: float
    asd: float


@dataclass
class MetricsReport:
    frames: list = field(default_factory=list)

    def values(self, metric):
        return np.array([getattr(f, metric) for f in self.frames], dtype=np.float64)

    def mean(self, metric):
        return float(self.values(metric).mean())

    def std(self, metric):
        return float(self.values(metric).std())

    def summary(self):
        return {m: (self.mean(m), self.std(m)) for m in METRICS}


def frame_metrics(pred, gt, tau=2.0, index=0):
    return FrameMetrics(index, dice(pred, gt), nsd(pred, gt, tau), hd95(pred, gt), asd(pred, gt))


def evaluate_video(preds, gts, tau=2.0):
    """Per-frame metrics for frames 1..T-1; frame 0 is the given annotation."""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predicted frames vs {len(gts)} ground-truth frames")
    if len(gts) < 2:
        raise ShapeError("evaluation needs at least two frames")
    report = MetricsReport([frame_metrics(preds[t], gts[t], tau, t) for t in range(1, len(gts))])
    assert report.frames[0].frame_index == 1
    return report
