"""PSNR, SSIM and PSNR-B on float images in [0, peak].

Inputs are (H, W) or (C, H, W) arrays. Everything is clamped to [0, peak]
before scoring.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
BT601 = np.array([0.299, 0.587, 0.114])


def _prep(a, b, peak):
    a = np.clip(np.asarray(a, dtype=np.float64), 0, peak)
    b = np.clip(np.asarray(b, dtype=np.float64), 0, peak)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(peak * peak / mse))


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _prep(a, b, peak)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 2-d correlation over fully-contained window positions
    k = g.size
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def _ssim_channel(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a, b = _prep(a, b, peak)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean([_ssim_channel(a[c], b[c], peak) for c in range(a.shape[0])]))


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[0] == 1:
        return img[0]
    if img.shape[0] != 3:
        raise ValueError(f"cannot take luminance of {img.shape[0]} channels")
    return np.tensordot(BT601, img, axes=(0, 0))


def _bef_axis(img: np.ndarray, block: int, eta: float) -> float:
    # differences between horizontally adjacent pixels (columns j, j+1)
    diffs = (img[:, :-1] - img[:, 1:]) ** 2
    n = img.shape[1]
    boundary = np.zeros(n - 1, dtype=bool)
    boundary[block - 1::block] = True
    if not boundary.any():
        return 0.0
    d_b = float(diffs[:, boundary].mean())
    d_nb = float(diffs[:, ~boundary].mean())
    return eta * (d_b - d_nb) if d_b > d_nb else 0.0


def blocking_effect_factor(img: np.ndarray, block: int = 8) -> float:
    """Horizontal plus vertical BEF of a single-channel image."""
    h, w = img.shape
    if h < block or w < block:
        raise ValueError(f"image {h}x{w} smaller than one {block}x{block} block")
    eta = math.log2(block) / math.log2(min(h, w))
    return _bef_axis(img, block, eta) + _bef_axis(img.T, block, eta)


def psnr_b(degraded, reference, block: int = 8, peak: float = 1.0) -> float:
    """PSNR with the blocking-effect factor of ``degraded`` added to the MSE (luminance)."""
    a, b = _prep(degraded, reference, peak)
    ya, yb = luminance(a), luminance(b)
    mse = float(np.mean((ya - yb) ** 2))
    bef = blocking_effect_factor(ya, block)
    if mse == 0:
        return PSNR_CAP  # nothing to penalise when the images agree
    return _psnr_from_mse(mse + bef, peak)
