"""Image quality metrics: universal image quality index and SSIM.

Inputs are [0, 1] images; both metrics rescale to [0, 255] first because
the SSIM stabilising constants assume an 8-bit dynamic range.  Statistics
use the population (divide-by-N) convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .validation import check_images, check_same_shape

DYNAMIC_RANGE = 255.0
C1 = 6.50   # (0.01 * 255)**2
C2 = 58.52  # (0.03 * 255)**2


class UndefinedStatisticError(ValueError):
    pass


@dataclass(frozen=True)
class ImageStats:
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov_xy: float

    @property
    def std_x(self) -> float:
        return float(np.sqrt(self.var_x))

    @property
    def std_y(self) -> float:
        return float(np.sqrt(self.var_y))


def _prepare(x, y):
    x = check_images(x, ndims=(2,), name="x") * DYNAMIC_RANGE
    y = check_images(y, ndims=(2,), name="y") * DYNAMIC_RANGE
    check_same_shape(x, y, "image")
    return x, y


def image_stats(x, y) -> ImageStats:
    """Global first and second moments of an image pair on the 0..255 scale."""
    x, y = _prepare(x, y)
    return _stats(x, y)


def _stats(x: np.ndarray, y: np.ndarray) -> ImageStats:
    mx = x.mean()
    my = y.mean()
    dx = x - mx
    dy = y - my
    return ImageStats(mx, my, np.mean(dx * dx), np.mean(dy * dy), np.mean(dx * dy))


def uiqi_components(x, y) -> tuple[float, float, float]:
    """(loss of correlation, luminance distortion, contrast distortion)."""
    s = image_stats(x, y)
    if s.var_x == 0 and s.var_y == 0:
        raise UndefinedStatisticError("UIQI undefined for two constant images")
    if s.mean_x ** 2 + s.mean_y ** 2 == 0:
        raise UndefinedStatisticError("UIQI undefined when both means are zero")
    sx, sy = s.std_x, s.std_y
    corr = s.cov_xy / (sx * sy) if sx * sy > 0 else 0.0
    lum = 2 * s.mean_x * s.mean_y / (s.mean_x ** 2 + s.mean_y ** 2)
    con = 2 * sx * sy / (s.var_x + s.var_y)
    return float(corr), float(lum), float(con)


def uiqi(x, y) -> float:
    """Universal image quality index over the whole image.

    The correlation and contrast factors are evaluated together as
    ``2*cov/(var_x + var_y)``, which equals their product, is exactly 1 for
    identical images and stays defined when one image is constant.
    """
    s = image_stats(x, y)
    if s.var_x == 0 and s.var_y == 0:
        raise UndefinedStatisticError("UIQI undefined for two constant images")
    denom_l = s.mean_x ** 2 + s.mean_y ** 2
    if denom_l == 0:
        raise UndefinedStatisticError("UIQI undefined when both means are zero")
    lum = 2 * s.mean_x * s.mean_y / denom_l
    corr_con = 2 * s.cov_xy / (s.var_x + s.var_y)
    return float(lum * corr_con)


def _ssim_formula(mx, my, vx, vy, cxy):
    num = (2 * mx * my + C1) * (2 * cxy + C2)
    den = (mx * mx + my * my + C1) * (vx + vy + C2)
    return num / den


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(x, y, window: int | None = None, sigma: float = 1.5) -> float:
    """Structural similarity with C1 = 6.50, C2 = 58.52.

    With ``window=None`` the statistics are global.  ``window=11`` gives the
    mean SSIM over all valid 11x11 Gaussian-weighted windows.
    """
    x, y = _prepare(x, y)
    if window is None:
        s = _stats(x, y)
        return float(_ssim_formula(s.mean_x, s.mean_y, s.var_x, s.var_y, s.cov_xy))
    if window > min(x.shape):
        raise ValueError(f"window {window} larger than image {x.shape}")
    g = _gaussian_window(window, sigma)
    half = window // 2

    def filt(a):
        a = correlate1d(a, g, axis=0, mode="constant")
        a = correlate1d(a, g, axis=1, mode="constant")
        return a[half:a.shape[0] - (window - 1 - half), half:a.shape[1] - (window - 1 - half)]

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    return float(np.mean(_ssim_formula(mx, my, vx, vy, cxy)))


def volume_report(a: np.ndarray, b: np.ndarray) -> dict:
    """Per-B-scan and mean UIQI/SSIM for two ``(D, H, W)`` volumes."""
    a = check_images(a, ndims=(3,), name="a")
    b = check_images(b, ndims=(3,), name="b")
    check_same_shape(a, b, "volume")
    rows = []
    for i, (xa, xb) in enumerate(zip(a, b)):
        try:
            q = uiqi(xa, xb)
        except UndefinedStatisticError:
            q = None
        rows.append({"bscan": i, "uiqi": q, "ssim": ssim(xa, xb)})
    valid = [r["uiqi"] for r in rows if r["uiqi"] is not None]
    return {
        "per_bscan": rows,
        "mean_uiqi": float(np.mean(valid)) if valid else None,
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
    }
