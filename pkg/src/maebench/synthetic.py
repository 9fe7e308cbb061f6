"""Synthetic radiograph-like datasets for smoke runs and tests.

All generators are deterministic in ``seed`` and return float images in
``[0, 1]``.
"""

from __future__ import annotations

import numpy as np

from .rng import seeded_rng


def _soft(d: np.ndarray, width: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-d / width))


def structured_images(n: int, side: int = 32, seed: int = 0, jitter: float = 0.5) -> np.ndarray:
    """Chest-phantom images ``[n, side, side]`` with soft edges and random jitter.

    A bright torso ellipse holds two darker lung fields, a spine band and
    rib arcs. Shift, scale, rib phase and contrast vary per image (scaled by
    ``jitter``); there is no pixel noise, so every patch is predictable from
    its context.
    """
    rng = seeded_rng(seed, 101)
    grid = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    edge = 2.0 / side
    out = np.empty((n, side, side))
    for i in range(n):
        dx, dy = rng.uniform(-0.08, 0.08, size=2) * jitter
        s = 1.0 + rng.uniform(-0.08, 0.08) * jitter
        x, y = (xx - dx) / s, (yy - dy) / s
        torso = _soft(1.0 - np.hypot(x / 0.85, y / 0.95), edge)
        lungs = sum(_soft(1.0 - np.hypot((x - cx) / 0.3, (y + 0.05) / 0.6), edge) for cx in (-0.38, 0.38))
        spine = _soft(0.09 - np.abs(x), edge)
        ribs = 0.5 + 0.5 * np.cos(2 * np.pi * (2.5 * (y + 0.25 * x * x) + rng.uniform(-0.2, 0.2) * jitter))
        contrast = 1.0 + rng.uniform(-0.1, 0.1) * jitter
        img = 0.15 + torso * (0.55 - lungs * (0.35 - 0.12 * ribs)) + 0.2 * spine * torso
        out[i] = 0.5 + (img - 0.5) * contrast
    return np.clip(out, 0.0, 1.0)


def quadrant_images(n: int, side: int = 32, seed: int = 0, separation: float = 2.0,
                    noise: float = 0.05) -> tuple:
    """Two-class set: Gaussian blob features rendered as quadrant brightness.

    A sample of class ``c`` draws ``z ~ N(+-separation/2 * (1, 1), I)``; the
    top-left quadrant gets intensity ``sigmoid(z0)`` and the bottom-right
    ``sigmoid(z1)``. Returns ``(images [n, side, side], labels [n])``.
    """
    rng = seeded_rng(seed, 102)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    h = side // 2
    images = np.full((n, side, side), 0.5)
    for i in range(n):
        mu = separation / 2 * (1 if labels[i] else -1)
        z = rng.normal(mu, 1.0, size=2)
        images[i, :h, :h] = 1.0 / (1.0 + np.exp(-z[0]))
        images[i, h:, h:] = 1.0 / (1.0 + np.exp(-z[1]))
    images += rng.normal(0.0, noise, size=images.shape)
    return np.clip(images, 0.0, 1.0), labels


def box_images(n: int, side: int = 32, num_classes: int = 2, seed: int = 0,
               max_boxes: int = 2) -> tuple:
    """Bright rectangles on a dark, noisy background.

    Class ``k`` rectangles have intensity ``0.55 + 0.4 k / max(1, K - 1)``.
    Returns ``(images, boxes)`` with boxes as ``(class, x0, y0, x1, y1)`` lists.
    """
    rng = seeded_rng(seed, 103)
    images = np.clip(0.1 + rng.normal(0.0, 0.02, size=(n, side, side)), 0.0, 1.0)
    all_boxes = []
    for i in range(n):
        boxes = []
        for _ in range(int(rng.integers(1, max_boxes + 1))):
            k = int(rng.integers(0, num_classes))
            w, h = (int(v) for v in rng.integers(side // 6, side // 3, size=2))
            x0 = int(rng.integers(0, side - w))
            y0 = int(rng.integers(0, side - h))
            images[i, y0 : y0 + h, x0 : x0 + w] = 0.55 + 0.4 * k / max(1, num_classes - 1)
            boxes.append((k, float(x0), float(y0), float(x0 + w), float(y0 + h)))
        all_boxes.append(boxes)
    return images, all_boxes
