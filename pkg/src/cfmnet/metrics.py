"""PSNR and SSIM for images in [0, 1]."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

K1, K2 = 0.01, 0.03
WINDOW = 11
WINDOW_SIGMA = 1.5


def psnr(x: np.ndarray, x_hat: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give +inf."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"psnr: shapes differ, {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable weighted sums over every fully contained window
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def _ssim_2d(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    g = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(x: np.ndarray, x_hat: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid positions.

    Accepts (H, W) or (C, H, W); multi-channel images average per-channel SSIM.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"ssim: shapes differ, {x.shape} vs {x_hat.shape}")
    if x.ndim == 2:
        x, x_hat = x[None], x_hat[None]
    if x.ndim != 3:
        raise ShapeError(f"ssim expects (H, W) or (C, H, W), got {x.shape}")
    if min(x.shape[1:]) < WINDOW:
        raise ShapeError(f"ssim needs images of at least {WINDOW}x{WINDOW}, got {x.shape[1:]}")
    return float(np.mean([_ssim_2d(a, b, data_range) for a, b in zip(x, x_hat)]))
