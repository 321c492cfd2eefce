"""Masked image metrics (PSNR/SSIM), percentile reporting, and the foveal
crop used when scoring only the gaze region.

The mask is the union of nonzero-alpha pixels of the two images, which keeps
large empty backgrounds from inflating scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class UndefinedMetricError(Exception):
    """Raised when the mask is empty and the metric has no value."""


def _to_float_rgba(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 4:
        raise ValueError("expected an (H, W, 4) RGBA image")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _mask_of(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[:, :, 3] > 0) | (b[:, :, 3] > 0)


def masked_psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """PSNR over RGB restricted to pixels with nonzero alpha in either image.

    Unit-range images; identical masked content returns the 99 dB cap.
    """
    a = _to_float_rgba(img_a)
    b = _to_float_rgba(img_b)
    if a.shape != b.shape:
        raise ValueError("image resolutions differ")
    mask = _mask_of(a, b)
    if not mask.any():
        raise UndefinedMetricError("both images are fully transparent")
    diff = a[:, :, :3][mask] - b[:, :, :3][mask]
    mse = float(np.mean(diff * diff))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gauss_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _filt(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _KERNEL, axis=0, mode="reflect")
    return correlate1d(out, _KERNEL, axis=1, mode="reflect")


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel single-channel SSIM with the standard 11-tap Gaussian window."""
    mu_x = _filt(x)
    mu_y = _filt(y)
    var_x = _filt(x * x) - mu_x**2
    var_y = _filt(y * y) - mu_y**2
    cov = _filt(x * y) - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    return (a1 * a2) / (b1 * b2)


def masked_ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean SSIM over RGB channels, averaged over masked window centers."""
    a = _to_float_rgba(img_a)
    b = _to_float_rgba(img_b)
    if a.shape != b.shape:
        raise ValueError("image resolutions differ")
    mask = _mask_of(a, b)
    if not mask.any():
        raise UndefinedMetricError("both images are fully transparent")
    vals = [float(ssim_map(a[:, :, c], b[:, :, c])[mask].mean()) for c in range(3)]
    return float(np.mean(vals))


def ssim_and_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM of a single channel and its gradient with respect to ``x``."""
    mu_x = _filt(x)
    mu_y = _filt(y)
    var_x = _filt(x * x) - mu_x**2
    var_y = _filt(y * y) - mu_y**2
    cov = _filt(x * y) - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    n = x.size
    # dS/dmu_x, dS/dvar_x, dS/dcov per pixel
    g_mu = (2 * mu_y * a2) / (b1 * b2) - s * 2 * mu_x / b1
    g_var = -s / b2
    g_cov = 2 * a1 / (b1 * b2)
    grad = (
        _filt(g_mu)
        + 2.0 * x * _filt(g_var)
        - 2.0 * _filt(g_var * mu_x)
        + y * _filt(g_cov)
        - _filt(g_cov * mu_y)
    ) / n
    return float(s.mean()), grad


def percentiles(values, ps) -> list[float]:
    """Linear-interpolation percentile estimator; input need not be sorted."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("percentiles of an empty sequence")
    return [float(v) for v in np.percentile(arr, ps)]


def foveal_crop(img: np.ndarray, center_uv, fov_deg: float, cam) -> np.ndarray:
    """Region of ``img`` subtending ``fov_deg`` (vertical) about ``center_uv``.

    Parts of the window that fall outside the image are returned with alpha 0,
    so downstream masked metrics ignore them.
    """
    a = _to_float_rgba(img)
    h, w = a.shape[:2]
    frac = np.tan(np.radians(fov_deg) / 2.0) / np.tan(np.radians(cam.fov_deg) / 2.0)
    half = int(round(frac * h / 2.0))
    if half < 1:
        raise ValueError("crop smaller than one pixel")
    cx = int(round(center_uv[0] * w))
    cy = int(round((1.0 - center_uv[1]) * h))
    out = np.zeros((2 * half, 2 * half, 4), dtype=np.float64)
    x0, x1 = cx - half, cx + half
    y0, y1 = cy - half, cy + half
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x1, w), min(y1, h)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = a[sy0:sy1, sx0:sx1]
    return out


@dataclass
class MaskedMetrics:
    mpsnr: float
    mssim: float
    mask_coverage: float


def compute_masked_metrics(img_a: np.ndarray, img_b: np.ndarray) -> MaskedMetrics:
    a = _to_float_rgba(img_a)
    b = _to_float_rgba(img_b)
    mask = _mask_of(a, b)
    return MaskedMetrics(
        mpsnr=masked_psnr(a, b),
        mssim=masked_ssim(a, b),
        mask_coverage=float(mask.mean()),
    )
