"""Seeded synthetic RGB-D-saliency triples for toy training.

Each sample renders one or two anti-aliased shapes (discs or axis-aligned
rectangles) in a flat-coloured scene.  Depth is an inverse-distance ramp
from the shape centres, so objects sit near and the background falls away;
ground truth is the binarized shape coverage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class Sample:
    name: str
    rgb: np.ndarray    # (3, S, S) in [0, 1]
    depth: np.ndarray  # (1, S, S) in [0, 1]
    gt: np.ndarray     # (1, S, S) binary


def _disc_alpha(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dist = np.hypot(yy - cy, xx - cx)
    return np.clip(r + 0.5 - dist, 0.0, 1.0)


def _rect_alpha(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, hy: float, hx: float) -> np.ndarray:
    # signed distance to an axis-aligned box, linear edge ramp
    d = np.maximum(np.abs(yy - cy) - hy, np.abs(xx - cx) - hx)
    return np.clip(0.5 - d, 0.0, 1.0)


def make_sample(name: str, size: int, rng: np.random.Generator) -> Sample:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_shapes = int(rng.integers(1, 3))
    alpha = np.zeros((size, size))
    centres = []
    for _ in range(n_shapes):
        cy = float(rng.uniform(0.25, 0.75) * size)
        cx = float(rng.uniform(0.25, 0.75) * size)
        centres.append((cy, cx))
        if rng.random() < 0.5:
            r = float(rng.uniform(0.10, 0.22) * size)
            alpha = np.maximum(alpha, _disc_alpha(yy, xx, cy, cx, r))
        else:
            hy = float(rng.uniform(0.08, 0.20) * size)
            hx = float(rng.uniform(0.08, 0.20) * size)
            alpha = np.maximum(alpha, _rect_alpha(yy, xx, cy, cx, hy, hx))

    background = rng.uniform(0.1, 0.9, size=3)
    foreground = np.clip(1.0 - background + rng.uniform(-0.1, 0.1, size=3), 0.0, 1.0)
    rgb = background[:, None, None] * (1.0 - alpha) + foreground[:, None, None] * alpha

    # inverse-distance ramp from the nearest shape centre
    dist = np.full((size, size), np.inf)
    for cy, cx in centres:
        dist = np.minimum(dist, np.hypot(yy - cy, xx - cx))
    depth = 1.0 / (1.0 + 4.0 * dist / size)

    gt = (alpha >= 0.5).astype(np.float64)
    return Sample(name=name, rgb=rgb, depth=depth[None], gt=gt[None])


def make_dataset(count: int, size: int, seed: int) -> list[Sample]:
    """Deterministic list of triples; each sample has its own derived stream."""
    if count < 1:
        raise ValidationError(f"synthetic dataset needs at least 1 sample, got {count}")
    if size < 8:
        raise ValidationError(f"synthetic size must be at least 8, got {size}")
    root = np.random.SeedSequence([int(seed), 0x5A17])
    return [make_sample(f"synth_{i:03d}", size, np.random.default_rng(child))
            for i, child in enumerate(root.spawn(count))]
