"""Classical digital enhancement of B-scans.

The chain is spatial averaging, then per-A-scan compensation with a
contrast exponent, then CLAHE.  Every operator maps [0, 1] images to
[0, 1] images and is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_images

EXCLUDE_CENTER = "exclude_center"
INCLUDE_CENTER = "include_center"
AVERAGING_MODES = (EXCLUDE_CENTER, INCLUDE_CENTER)

COMPENSATION_EPS = 1e-12
NBINS = 256


@dataclass(frozen=True)
class EnhanceConfig:
    contrast_exponent: float = 2.0
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    averaging_mode: str = EXCLUDE_CENTER

    def __post_init__(self):
        if self.contrast_exponent < 1:
            raise ValueError("contrast exponent must be >= 1")
        if self.clahe_clip < 1:
            raise ValueError("CLAHE clip limit must be >= 1")
        rows, cols = self.clahe_tiles
        if rows < 1 or cols < 1:
            raise ValueError("CLAHE tile grid must be at least 1x1")
        object.__setattr__(self, "clahe_tiles", (int(rows), int(cols)))
        if self.averaging_mode not in AVERAGING_MODES:
            raise ValueError(f"averaging mode must be one of {AVERAGING_MODES}")


def spatial_average(img: np.ndarray, mode: str = EXCLUDE_CENTER) -> np.ndarray:
    """Replace each pixel by the mean of its 3x3 in-plane neighbourhood.

    In ``exclude_center`` mode the centre pixel is left out (mean of the 8
    neighbours); ``include_center`` gives the plain 3x3 box mean.  Borders
    use replicate padding.
    """
    img = np.asarray(img, dtype=np.float64)
    if mode not in AVERAGING_MODES:
        raise ValueError(f"unknown averaging mode {mode!r}")
    h, w = img.shape
    p = np.pad(img, 1, mode="edge")
    total = np.zeros_like(img)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            if mode == EXCLUDE_CENTER and dy == 1 and dx == 1:
                continue
            total += p[dy:dy + h, dx:dx + w]
    n = 8.0 if mode == EXCLUDE_CENTER else 9.0
    return np.clip(total / n, 0.0, 1.0)


def compensate(img: np.ndarray, exponent: float = 2.0) -> np.ndarray:
    """Attenuation compensation with contrast exponent, column by column.

    ``out[z] = I[z]**n / (2 * sum_{k>=z} I[k]**n)``; tail sums below
    ``COMPENSATION_EPS`` are replaced by it.
    """
    img = np.asarray(img, dtype=np.float64)
    powered = img ** exponent
    # reverse cumulative sum down each column (axis 0 is depth)
    tail = np.cumsum(powered[::-1], axis=0)[::-1]
    tail = np.maximum(2.0 * tail, COMPENSATION_EPS)
    return np.clip(powered / tail, 0.0, 1.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(img * (NBINS - 1) + 0.5), 0, NBINS - 1).astype(np.int64)


def _clip_histogram(hist: np.ndarray, limit: int) -> np.ndarray:
    hist = hist.copy()
    excess = int(np.sum(np.maximum(hist - limit, 0)))
    np.minimum(hist, limit, out=hist)
    batch = excess // NBINS
    hist += batch
    residual = excess - batch * NBINS
    if residual:
        step = max(NBINS // residual, 1)
        for i in range(0, NBINS, step):
            if residual == 0:
                break
            hist[i] += 1
            residual -= 1
    return hist


def clahe(img: np.ndarray, clip: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast limited adaptive histogram equalisation.

    Intensities are quantised to 256 bins.  The image is reflect-padded to a
    multiple of the tile grid, each tile's histogram is clipped at
    ``max(int(clip * tile_pixels / 256), 1)`` counts with the excess spread
    uniformly, and the per-tile equalisation maps are blended bilinearly
    between tile centres.  ``clip <= 0`` disables clipping.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    rows = max(1, min(int(tiles[0]), h))
    cols = max(1, min(int(tiles[1]), w))
    th = -(-h // rows)
    tw = -(-w // cols)
    q = _quantize(img)
    padded = np.pad(q, ((0, th * rows - h), (0, tw * cols - w)), mode="reflect") \
        if (th * rows != h or tw * cols != w) else q

    area = th * tw
    limit = max(int(clip * area / NBINS), 1) if clip > 0 else None
    luts = np.empty((rows, cols, NBINS), dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            tile = padded[r * th:(r + 1) * th, c * tw:(c + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=NBINS)
            if limit is not None:
                hist = _clip_histogram(hist, limit)
            cdf = np.cumsum(hist)
            luts[r, c] = np.clip(np.rint(cdf * ((NBINS - 1) / area)), 0, NBINS - 1)

    yf = np.arange(h) / th - 0.5
    y1 = np.floor(yf).astype(int)
    ya = (yf - y1)[:, None]
    y2 = np.minimum(y1 + 1, rows - 1)
    y1 = np.maximum(y1, 0)
    xf = np.arange(w) / tw - 0.5
    x1 = np.floor(xf).astype(int)
    xa = (xf - x1)[None, :]
    x2 = np.minimum(x1 + 1, cols - 1)
    x1 = np.maximum(x1, 0)

    Y1, X1 = y1[:, None], x1[None, :]
    Y2, X2 = y2[:, None], x2[None, :]
    top = luts[Y1, X1, q] * (1 - xa) + luts[Y1, X2, q] * xa
    bot = luts[Y2, X1, q] * (1 - xa) + luts[Y2, X2, q] * xa
    out = top * (1 - ya) + bot * ya
    return np.clip(out / (NBINS - 1), 0.0, 1.0)


def digital_enhance(img: np.ndarray, cfg: EnhanceConfig | None = None) -> np.ndarray:
    """Full digital enhancement of one B-scan."""
    cfg = cfg or EnhanceConfig()
    out = spatial_average(img, cfg.averaging_mode)
    out = compensate(out, cfg.contrast_exponent)
    return clahe(out, cfg.clahe_clip, cfg.clahe_tiles)


def enhance_volume(voxels: np.ndarray, cfg: EnhanceConfig | None = None) -> np.ndarray:
    """Apply :func:`digital_enhance` to every B-scan of a ``(D, H, W)`` array."""
    return np.stack([digital_enhance(b, cfg) for b in np.asarray(voxels)], axis=0)


class DigitalEnhancer(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`digital_enhance`.

    Accepts one B-scan ``(H, W)`` or a stack ``(n, H, W)``; volumes stored
    B-scan-major pass straight through as stacks.
    """

    def __init__(self, contrast_exponent=2.0, clahe_clip=2.0, clahe_tiles=(8, 8),
                 averaging_mode=EXCLUDE_CENTER):
        self.contrast_exponent = contrast_exponent
        self.clahe_clip = clahe_clip
        self.clahe_tiles = clahe_tiles
        self.averaging_mode = averaging_mode

    def _config(self) -> EnhanceConfig:
        return EnhanceConfig(self.contrast_exponent, self.clahe_clip,
                             tuple(self.clahe_tiles), self.averaging_mode)

    def fit(self, X, y=None):
        self._config()
        check_images(X)
        return self

    def transform(self, X):
        X = check_images(X)
        cfg = self._config()
        if X.ndim == 2:
            return digital_enhance(X, cfg)
        return enhance_volume(X, cfg)
