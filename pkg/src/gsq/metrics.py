"""Reconstruction quality metrics: MSE, PSNR, SSIM.

Values are interpreted on a [0, 1] scale with peak 1.0.  The functions do
not clamp their inputs; callers clamp renders before measuring (the fitter
and CLI do).  PSNR of identical images is reported as +inf.

The SSIM variant is pinned: 11x11 Gaussian window (sigma 1.5, truncate 3.5,
reflect boundary), population covariance, C1 = (0.01)^2, C2 = (0.03)^2,
filter-radius border strip ignored, channels averaged at the end.  This is
the de-facto standard configuration, so scores are comparable with commonly
reported numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ShapeError
from .rasterizer import FeatureMap

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_WIN = 2 * int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5) + 1  # 11
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class MetricReport:
    mse: float
    psnr: float  # +inf when mse == 0
    ssim: float


def _plane(x) -> np.ndarray:
    data = x.data if isinstance(x, FeatureMap) else np.asarray(x, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, np.newaxis]
    if data.ndim != 3:
        raise ShapeError(f"expected H x W [x D] image, got shape {data.shape}")
    return data.astype(np.float64, copy=False)


def _pair(a, b):
    a, b = _plane(a), _plane(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over all pixels and channels; +inf for equal images."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / err))


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    args = dict(sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")
    ux = gaussian_filter(x, **args)
    uy = gaussian_filter(y, **args)
    uxx = gaussian_filter(x * x, **args)
    uyy = gaussian_filter(y * y, **args)
    uxy = gaussian_filter(x * y, **args)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    s = ((2 * ux * uy + SSIM_C1) * (2 * vxy + SSIM_C2)) / (
        (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2)
    )
    pad = (SSIM_WIN - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def ssim(a, b) -> float:
    """Mean local SSIM, per-channel planes averaged at the end."""
    a, b = _pair(a, b)
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ShapeError(
            f"image {a.shape[0]}x{a.shape[1]} smaller than the {SSIM_WIN}x{SSIM_WIN} window"
        )
    return float(np.mean([_ssim_plane(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]))


def evaluate(a, b) -> MetricReport:
    return MetricReport(mse=mse(a, b), psnr=psnr(a, b), ssim=ssim(a, b))
