"""Depth and relighting quality metrics.

Depth errors are reported in millimeters; an inlier is a pixel whose absolute
depth error is below the threshold (3 mm by default). Image quality uses PSNR
with the reference image's max as peak and SSIM with the standard 11x11
Gaussian window (sigma 1.5, K1 = 0.01, K2 = 0.03) averaged over the mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

from .errors import DomainError

__all__ = ["DepthReport", "depth_metrics", "image_metrics", "PSNR_CAP"]

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class DepthReport:
    rmse_mm: float
    inlier_pct: float
    rmse_inliers_mm: float
    threshold_mm: float = 3.0

    def as_dict(self) -> dict:
        return {
            "rmse_mm": self.rmse_mm,
            "inlier_pct": self.inlier_pct,
            "rmse_inliers_mm": self.rmse_inliers_mm,
            "threshold_mm": self.threshold_mm,
        }


def depth_metrics(est: np.ndarray, truth: np.ndarray, mask: np.ndarray,
                  threshold_mm: float = 3.0) -> DepthReport:
    """RMSE over masked pixels, inlier percentage, and inlier-restricted RMSE.
    Depths are in meters."""
    est = np.asarray(est, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if est.shape != truth.shape or est.shape != mask.shape:
        raise DomainError("depth_metrics shape mismatch")
    if not mask.any():
        raise DomainError("depth_metrics: empty mask")
    err_mm = (est[mask] - truth[mask]) * 1000.0
    rmse = float(np.sqrt(np.mean(err_mm**2)))
    inl = np.abs(err_mm) < threshold_mm
    pct = float(100.0 * inl.mean())
    rmse_inl = float(np.sqrt(np.mean(err_mm[inl] ** 2))) if inl.any() else float("nan")
    return DepthReport(rmse_mm=rmse, inlier_pct=pct, rmse_inliers_mm=rmse_inl,
                       threshold_mm=threshold_mm)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _ssim_map(a: np.ndarray, b: np.ndarray, peak: float) -> np.ndarray:
    kern = _gaussian_kernel()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    f = lambda x: convolve(x, kern, mode="reflect")
    mu_a, mu_b = f(a), f(b)
    va = f(a * a) - mu_a**2
    vb = f(b * b) - mu_b**2
    cov = f(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
    )


def image_metrics(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> dict:
    """PSNR (dB, capped at 99) and SSIM of image ``a`` against reference ``b``
    over the masked region. Multi-channel inputs are averaged per channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape:
        raise DomainError("image_metrics shape mismatch")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if mask.shape != a.shape[:2]:
        raise DomainError("image_metrics mask shape mismatch")
    if not mask.any():
        raise DomainError("image_metrics: empty mask")
    peak = float(b.max())
    mse = float(np.mean((a[mask] - b[mask]) ** 2))
    if mse <= 0.0 or peak <= 0.0:
        psnr = PSNR_CAP
    else:
        psnr = min(PSNR_CAP, float(20.0 * np.log10(peak / np.sqrt(mse))))
    ssim_vals = [
        _ssim_map(a[..., c], b[..., c], peak if peak > 0 else 1.0)[mask].mean()
        for c in range(a.shape[2])
    ]
    return {"psnr": psnr, "ssim": float(np.mean(ssim_vals))}
