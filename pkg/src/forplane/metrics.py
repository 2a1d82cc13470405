"""Image and depth evaluation metrics: PSNR, masked PSNR, SSIM, depth RMSE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP = 99.0  # identical images would be +inf; cap keeps CSV logs finite


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) with MAX = 1; optional mask restricts the mean."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    err = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        if not mask.any():
            raise ValueError("empty mask")
        err = err[mask]
    mse = float(err.mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         window: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM, 11x11 Gaussian window, dynamic range 1.

    Computed per channel on the valid interior and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if min(a.shape[0], a.shape[1]) < window:
        raise ValueError(f"image smaller than the {window}x{window} SSIM window")
    c1 = k1 * k1
    c2 = k2 * k2
    kern = _gaussian_window(window, sigma)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = convolve2d(x, kern, mode="valid")
        mu_y = convolve2d(y, kern, mode="valid")
        xx = convolve2d(x * x, kern, mode="valid") - mu_x * mu_x
        yy = convolve2d(y * y, kern, mode="valid") - mu_y * mu_y
        xy = convolve2d(x * y, kern, mode="valid") - mu_x * mu_y
        s = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / \
            ((mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def depth_rmse(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid).astype(bool)
    if not valid.any():
        raise ValueError("no valid depth pixels")
    d = pred[valid] - gt[valid]
    return float(np.sqrt((d * d).mean()))


@dataclass
class MetricReport:
    psnr: float
    psnr_masked: float
    ssim: float
    depth_rmse: float
    per_frame: list[dict] = field(default_factory=list)

    @classmethod
    def from_frames(cls, rows: list[dict]) -> "MetricReport":
        def mean(key):
            vals = [r[key] for r in rows if r.get(key) is not None]
            return float(np.mean(vals)) if vals else float("nan")
        return cls(mean("psnr"), mean("psnr_masked"), mean("ssim"),
                   mean("depth_rmse"), rows)
