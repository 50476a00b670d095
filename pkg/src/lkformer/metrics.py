"""PSNR and SSIM on single-channel 8-bit-range images (float64 arrays)."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b, border_crop: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"expected two equal-size 2-D images, got {a.shape} and {b.shape}")
    if border_crop < 0 or 2 * border_crop >= min(a.shape):
        raise ValueError(f"border crop {border_crop} too large for {a.shape}")
    if border_crop:
        s = slice(border_crop, -border_crop)
        a, b = a[s, s], b[s, s]
    return a, b


def psnr(a, b, border_crop: int = 0) -> float:
    """10 log10(255^2 / MSE); identical images give ``math.inf``."""
    a, b = _pair(a, b, border_crop)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """1-D Gaussian taps normalized to sum to 1 (the 2-D window is its outer product)."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_maps(a, b, border_crop: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Local SSIM map and its contrast-structure factor over valid windows."""
    a, b = _pair(a, b, border_crop)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    luminance = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    return luminance * cs, cs


def ssim(a, b, border_crop: int = 0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, L=255."""
    return float(ssim_maps(a, b, border_crop)[0].mean())
