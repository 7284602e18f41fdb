"""Additive white Gaussian noise and noise level maps.

All intensities are in [0, 1] units; a standard deviation quoted on the
0-255 scale is divided by 255 before it reaches anything here.
Standard normals come from a Philox (counter-based) stream through the
Box-Muller transform, so a (seed, shape) pair pins the field down exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, ShapeError

UNIFORM = "uniform"
PEAKS = "peaks"
CUSTOM = "custom"


def from_255(sigma: float) -> float:
    return float(sigma) / 255.0


@dataclass(frozen=True)
class NoiseLevelMap:
    values: np.ndarray
    provenance: str = CUSTOM
    sigma: Optional[float] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"noise level map must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("noise level map entries must be finite and non-negative")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def uniform_map(sigma: float, height: int, width: int) -> NoiseLevelMap:
    if sigma < 0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    return NoiseLevelMap(np.full((height, width), float(sigma)), UNIFORM, float(sigma))


def peaks(x, y):
    """The two-dimensional bump function used to shape spatially variant noise."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (3.0 * (1.0 - x) ** 2 * np.exp(-x ** 2 - (y + 1.0) ** 2)
            - 10.0 * (x / 5.0 - x ** 3 - y ** 5) * np.exp(-x ** 2 - y ** 2))


def peaks_raw(height: int, width: int) -> np.ndarray:
    """Un-normalised map: entry (i, j) is peaks(6 i / H - 3, 6 j / W - 3)."""
    i = np.arange(height, dtype=np.float64)[:, None]
    j = np.arange(width, dtype=np.float64)[None, :]
    return peaks(6.0 * i / height - 3.0, 6.0 * j / width - 3.0)


def peaks_map(sigma: float, height: int, width: int) -> NoiseLevelMap:
    """Spatially variant map, min-max normalised to exactly [0, sigma]."""
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    if height < 2 or width < 2:
        raise DomainError(f"peaks map needs H, W >= 2, got {height}x{width}")
    raw = peaks_raw(height, width)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        raise DomainError("degenerate peaks map (max equals min)")
    values = sigma * (raw - lo) / (hi - lo)
    # pin the extremes so min == 0 and max == sigma hold bit-exactly
    values[raw == lo] = 0.0
    values[raw == hi] = sigma
    return NoiseLevelMap(values, PEAKS, float(sigma))


def standard_normal(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    """i.i.d. N(0, 1) samples: Philox uniforms through Box-Muller (float64)."""
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    gen = np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))
    u = gen.random((2, pairs))
    radius = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u lies in (0, 1]
    theta = 2.0 * np.pi * u[1]
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(theta)
    z[1::2] = radius * np.sin(theta)
    return z[:n].reshape(shape)


def synthesize_noise(noise_map: NoiseLevelMap, seed: int, channels: int = 1) -> np.ndarray:
    """n = n0 * M with one standard-normal field per channel; shape (C, H, W)."""
    h, w = noise_map.shape
    n0 = standard_normal(seed, (channels, h, w))
    return n0 * noise_map.values[None]


def add_noise(x: np.ndarray, noise_map: NoiseLevelMap, seed: int) -> tuple[np.ndarray, NoiseLevelMap]:
    """Noisy observation x + n for a (C, H, W) clean image; not clipped."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1:] != noise_map.shape:
        raise ShapeError(f"image {x.shape} does not match map {noise_map.shape}")
    n = synthesize_noise(noise_map, seed, x.shape[0])
    return x + n, noise_map


def derive_seed(base: int, index: int) -> int:
    return (int(base) ^ int(index)) & 0xFFFFFFFFFFFFFFFF
