"""Registration baseline: propagate the first mask by integer translation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, PromptError
from .synthdata import shift_mask


@dataclass(frozen=True)
class RigidConfig:
    radius: int = 8
    roi_dilation: int = 3

    def __post_init__(self):
        if self.radius < 0 or self.roi_dilation < 0:
            raise ConfigError("search radius and ROI dilation must be non-negative")


def _disk(r):
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def search_order(radius):
    """Offsets (dx, dy) sorted by |dx|+|dy|, then lexicographically; earlier wins ties."""
    offsets = [(dx, dy) for dx in range(-radius, radius + 1) for dy in range(-radius, radius + 1)]
    return sorted(offsets, key=lambda o: (abs(o[0]) + abs(o[1]), o[0], o[1]))


def ncc(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return float(np.dot(a, b) / denom) if denom > 0 else 0.0


def best_offset(template_img, target_img, roi, radius):
    ys, xs = np.nonzero(roi)
    h, w = target_img.shape
    best, best_score = (0, 0), -np.inf
    for dx, dy in search_order(radius):
        ty, tx = ys + dy, xs + dx
        ok = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        if ok.sum() < 2:
            continue
        score = ncc(template_img[ys[ok], xs[ok]], target_img[ty[ok], tx[ok]])
        if score > best_score:
            best, best_score = (dx, dy), score
    return best


def rigid_track(frames, first_mask, cfg=RigidConfig()):
    """First-frame mask shifted to the NCC-best offset of each later frame."""
    frames = np.asarray(frames, dtype=np.float64)
    first_mask = np.asarray(first_mask, dtype=bool)
    if not first_mask.any():
        raise PromptError("first-frame mask is empty")
    roi = first_mask
    if cfg.roi_dilation:
        roi = ndimage.binary_dilation(first_mask, structure=_disk(cfg.roi_dilation))
    out = [first_mask.copy()]
    for t in range(1, len(frames)):
        dx, dy = best_offset(frames[0], frames[t], roi, cfg.radius)
        out.append(shift_mask(first_mask, dx, dy))
    return out


def copy_track(frames, first_mask):
    """Repeat the first mask on every frame."""
    first_mask = np.asarray(first_mask, dtype=bool)
    return [first_mask.copy() for _ in range(len(frames))]
