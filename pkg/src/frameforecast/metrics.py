"""SSIM and PSNR on [0, 1]-normalized RGB images.

SSIM follows the Wang et al. (2004) parameterization: an 11x11 Gaussian window with
sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1. Local statistics are taken over
windows lying fully inside the image ("valid" filtering); the per-channel mean SSIM
maps are averaged over channels.
"""

from __future__ import annotations

import math

import numpy as np

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
DATA_RANGE = 1.0

# Identical images have infinite PSNR; aggregates substitute this cap and flag it.
PSNR_CAP_DB = 100.0


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def gaussian_kernel_1d(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D array with the outer product ``g g^T``."""
    k = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-window SSIM for a pair of single-channel images."""
    g = gaussian_kernel_1d()
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two H x W x C (or H x W) images, averaged over channels.

    Both sides must be at least 11 pixels in each spatial dimension.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < WINDOW_SIZE:
        raise ValueError(f"images must be at least {WINDOW_SIZE}x{WINDOW_SIZE} for SSIM, "
                         f"got {a.shape[0]}x{a.shape[1]}")
    vals = [ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]
    return float(np.mean(vals))


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) in dB; ``math.inf`` for identical images."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE ** 2 / err)


def capped_psnr(value: float) -> float:
    return PSNR_CAP_DB if math.isinf(value) else value
