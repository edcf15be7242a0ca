"""Image quality metrics: PSNR and windowed structural similarity.

Metrics run on plain numpy arrays (channel-first or single-channel 2-D),
always in float64, outside the autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .tensor import ContractViolation

PSNR_CAP_DB = 120.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    n_images: int


def _as_chw(x: np.ndarray, op: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        return a[None]
    if a.ndim == 3:
        return a
    raise ContractViolation(f"{op}: expected a 2-D or 3-D image, got rank {a.ndim}")


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at the 120 dB identical-image sentinel."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def ssim_window_kernel() -> np.ndarray:
    """Normalized 1-D Gaussian tap row for the similarity window."""
    r = SSIM_WINDOW // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return k / k.sum()


def _windowed_mean(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid-position weighted local means over the two trailing axes."""
    r = len(k) // 2
    out = ndimage.correlate1d(img, k, axis=-2, mode="constant")
    out = ndimage.correlate1d(out, k, axis=-1, mode="constant")
    return out[..., r:-r, r:-r]


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean local structural similarity, per channel, valid windows only."""
    a = _as_chw(x, "ssim")
    b = _as_chw(y, "ssim")
    if a.shape != b.shape:
        raise ContractViolation(f"ssim: shapes {a.shape} and {b.shape} differ")
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ContractViolation(
            f"ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    k = ssim_window_kernel()
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2

    mu_a = _windowed_mean(a, k)
    mu_b = _windowed_mean(b, k)
    var_a = _windowed_mean(a * a, k) - mu_a * mu_a
    var_b = _windowed_mean(b * b, k) - mu_b * mu_b
    cov = _windowed_mean(a * b, k) - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def evaluate_pairs(pairs: Iterable[Tuple[np.ndarray, np.ndarray]],
                   peak: float = 1.0) -> MetricReport:
    """Average metrics per image, then over the set."""
    psnrs = []
    ssims = []
    for pred, ref in pairs:
        psnrs.append(psnr(pred, ref, peak=peak))
        ssims.append(ssim(pred, ref))
    if not psnrs:
        raise ContractViolation("evaluate_pairs: empty pair set")
    return MetricReport(psnr_db=float(np.mean(psnrs)),
                        ssim=float(np.mean(ssims)),
                        n_images=len(psnrs))
