"""Procedural vessel-like test imagery.

Generates images with dark branching curvilinear structures on a smooth
textured background, mimicking the geometry of vascular imagery closely
enough to exercise detection, matching, and registration at desk scale.
No clinical data is shipped or required.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def _smooth_noise(shape: tuple[int, int], sigma: float,
                  rng: np.random.Generator) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    peak = np.abs(n).max()
    return n / peak if peak > 0 else n


def vessel_phantom(size: tuple[int, int] = (256, 256), seed: int = 0,
                   n_trees: int = 4, return_junctions: bool = False):
    """Render a vessel-like phantom, optionally with its branch-point coordinates.

    Returns a float32 image in [0, 1] with dark vessels, or
    (image, junctions) where junctions is an (N, 2) array of (x, y) branch points.
    """
    h, w = size
    rng = np.random.default_rng(seed)

    background = 0.78 + 0.12 * _smooth_noise((h, w), 20.0, rng) \
        + 0.05 * _smooth_noise((h, w), 5.0, rng)

    darkness = np.zeros((h, w), dtype=np.float64)
    junctions: list[tuple[float, float]] = []
    stack = []
    for _ in range(n_trees):
        pos = np.array([rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.1 * h, 0.9 * h)])
        heading = rng.uniform(0, 2 * np.pi)
        stack.append((pos, heading, rng.uniform(2.2, 3.4), int(rng.integers(150, 300))))

    max_segments = 40
    segments = 0
    while stack and segments < max_segments:
        pos, heading, width, steps = stack.pop()
        segments += 1
        pos = pos.copy()
        for _ in range(steps):
            heading += rng.normal(0, 0.13)
            pos += np.array([np.cos(heading), np.sin(heading)])
            if not (1 <= pos[0] < w - 1 and 1 <= pos[1] < h - 1):
                break
            r = max(width / 2.0, 0.6)
            ri = int(np.ceil(r))
            x0, y0 = int(round(pos[0])), int(round(pos[1]))
            xs = np.arange(max(0, x0 - ri), min(w, x0 + ri + 1))
            ys = np.arange(max(0, y0 - ri), min(h, y0 + ri + 1))
            gx, gy = np.meshgrid(xs, ys)
            d2 = (gx - pos[0]) ** 2 + (gy - pos[1]) ** 2
            stamp = np.clip(1.0 - np.sqrt(d2) / (r + 0.5), 0.0, 1.0)
            region = darkness[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1]
            np.maximum(region, stamp, out=region)
            width *= 0.9985
            if width > 1.3 and rng.uniform() < 0.012 and len(stack) < 12:
                junctions.append((pos[0], pos[1]))
                sign = 1.0 if rng.uniform() < 0.5 else -1.0
                stack.append((pos.copy(), heading + sign * rng.uniform(0.5, 1.1),
                              width * 0.72, int(rng.integers(60, 160))))
                width *= 0.85

    vessels = ndimage.gaussian_filter(darkness, 0.7)
    img = background - 0.5 * vessels
    img = img + 0.01 * rng.standard_normal((h, w))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    if return_junctions:
        return img, np.asarray(junctions, dtype=np.float64).reshape(-1, 2)
    return img


def threshold_vessel_mask(img: np.ndarray) -> np.ndarray:
    """Trivial intensity-threshold vessel mask (dark structures). Smoke-test
    quality only; real masks are supplied externally."""
    arr = np.asarray(img, dtype=np.float64)
    flat = ndimage.gaussian_filter(arr, 8.0)
    return (arr < flat - 0.08)
