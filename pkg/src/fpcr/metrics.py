"""Image quality metrics: PSNR and single-scale SSIM."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

PSNR_CAP = 99.0
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images, capped at 99 dB when MSE < 1e-10."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ShapeError(f"psnr: extents {img.shape} != {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D map with a 1-D kernel."""
    size = kernel.size
    h, w = img.shape
    out = np.empty((h - size + 1, w), dtype=np.float64)
    for i, kv in enumerate(kernel):
        contrib = kv * img[i : i + h - size + 1, :]
        out = contrib if i == 0 else out + contrib
    out2 = np.empty((h - size + 1, w - size + 1), dtype=np.float64)
    for j, kv in enumerate(kernel):
        contrib = kv * out[:, j : j + w - size + 1]
        out2 = contrib if j == 0 else out2 + contrib
    return out2


def ssim(img: np.ndarray, ref: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5),
    C1=.01^2, C2=.03^2, channel-averaged over the valid interior."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ShapeError(f"ssim: extents {img.shape} != {ref.shape}")
    if img.ndim == 2:
        img = img[..., None]
        ref = ref[..., None]
    if img.shape[0] < window or img.shape[1] < window:
        raise ShapeError(f"ssim: image smaller than the {window}x{window} window")
    kern = _gaussian_kernel(window, sigma)
    vals = []
    for c in range(img.shape[2]):
        x = img[..., c]
        y = ref[..., c]
        mu_x = _filter_valid(x, kern)
        mu_y = _filter_valid(y, kern)
        xx = _filter_valid(x * x, kern) - mu_x**2
        yy = _filter_valid(y * y, kern) - mu_y**2
        xy = _filter_valid(x * y, kern) - mu_x * mu_y
        num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * xy + _SSIM_C2)
        den = (mu_x**2 + mu_y**2 + _SSIM_C1) * (xx + yy + _SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
