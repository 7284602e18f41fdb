"""Procedural clean images standing in for a natural-image corpus.

Each image mixes a smooth random background, flat-shaded shapes with sharp
edges and a patch of oriented texture, which gives a denoiser both smooth
regions and detail to preserve.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .imageio import write_image


def synthetic_image(rng: np.random.Generator, height: int, width: int, channels: int = 1) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(0.2, 0.8) + rng.uniform(-0.3, 0.3) * (xx / width - 0.5) + rng.uniform(-0.3, 0.3) * (yy / height - 0.5)
    field = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=max(height, width) / 8, mode="wrap")
    field /= np.abs(field).max() + 1e-12
    img = np.repeat((base + 0.15 * field)[None], channels, axis=0)
    tint = rng.uniform(0.7, 1.3, size=(channels, 1, 1))
    img = img * tint

    for _ in range(rng.integers(3, 8)):
        color = rng.uniform(0.0, 1.0, size=(channels, 1, 1))
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.3) * min(height, width)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hh, ww = rng.uniform(0.1, 0.4) * height, rng.uniform(0.1, 0.4) * width
            angle = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
            v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
            mask = (np.abs(u) < ww / 2) & (np.abs(v) < hh / 2)
        img = np.where(mask[None], color, img)

    freq = rng.uniform(0.15, 0.6)
    angle = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(freq * (xx * np.cos(angle) + yy * np.sin(angle)))
    cy, cx = rng.uniform(0, height), rng.uniform(0, width)
    r = rng.uniform(0.15, 0.35) * min(height, width)
    region = ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r)[None]
    img = np.where(region, 0.6 * img + 0.4 * stripes[None], img)
    return np.clip(img, 0.0, 1.0)


def synthetic_corpus(count: int, size: int = 64, channels: int = 1, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size, size, channels) for _ in range(count)]


def write_corpus(directory, count: int, size: int = 64, channels: int = 1, seed: int = 0) -> list[Path]:
    """Write a synthetic corpus as 8-bit PGM/PPM files; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if channels == 1 else ".ppm"
    paths = []
    for i, img in enumerate(synthetic_corpus(count, size, channels, seed)):
        p = d / f"synth_{i:03d}{ext}"
        write_image(p, img)
        paths.append(p)
    return paths
