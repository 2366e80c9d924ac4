"""Peripapillary thickness extraction and ICC agreement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .volcore import LabelVolume, VoxelSpacing

RNFL = 1
GCC = 2
PARAMETER_CLASSES = {"p-RNFLT": RNFL, "p-GCCT": GCC}
ICC_VARIANT = "ICC(2,1) two-way random, single measure, absolute agreement"


class GeometryError(ValueError):
    """The sampling circle leaves the en-face extent of the volume."""

    def __init__(self, message, angle_deg=None):
        super().__init__(message)
        self.angle_deg = angle_deg


@dataclass(frozen=True)
class CircularScanConfig:
    """Circle geometry; ``center`` is ``(w, d)`` in voxel coordinates."""

    center: tuple[float, float]
    diameter_mm: float = 3.4
    samples: int = 360

    def __post_init__(self):
        if self.diameter_mm <= 0:
            raise ValueError("diameter must be > 0")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


@dataclass
class ThicknessMeasurement:
    thickness_um: float
    missing: bool = False
    noncontiguous: bool = False


@dataclass
class ThicknessProfile:
    kind: str
    angles_deg: list[float]
    thickness_um: list[float]
    missing: list[bool]
    noncontiguous: list[bool] = field(default_factory=list)

    @property
    def n_valid(self) -> int:
        return int(len(self.missing) - sum(self.missing))

    @property
    def global_um(self) -> float:
        """Mean over angles where the tissue was found (NaN if none)."""
        vals = [t for t, miss in zip(self.thickness_um, self.missing) if not miss]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        g = self.global_um
        return {
            "kind": self.kind,
            "global_um": None if math.isnan(g) else g,
            "n_valid": self.n_valid,
            "n_flagged_missing": len(self.missing) - self.n_valid,
            "n_flagged_noncontiguous": int(sum(self.noncontiguous)),
            "angles_deg": self.angles_deg,
            "thickness_um": self.thickness_um,
            "missing": list(self.missing),
        }


def _labels(l) -> np.ndarray:
    return l.labels if isinstance(l, LabelVolume) else np.asarray(l)


def circle_points(cfg: CircularScanConfig, spacing: VoxelSpacing):
    """Angles (degrees) and the nearest en-face voxel ``(w, d)`` for each."""
    radius_um = cfg.diameter_mm * 1000.0 / 2.0
    rw = radius_um / spacing.lateral_um
    rd = radius_um / spacing.bscan_um
    cw, cd = cfg.center
    theta = 2.0 * np.pi * np.arange(cfg.samples) / cfg.samples
    w = np.floor(cw + rw * np.cos(theta) + 0.5).astype(int)
    d = np.floor(cd + rd * np.sin(theta) + 0.5).astype(int)
    return np.degrees(theta), w, d


def circular_scan(l, spacing: VoxelSpacing, cfg: CircularScanConfig) -> list[np.ndarray]:
    """Label A-scans sampled at equally spaced angles on the circle.

    Returns one column (length H) per angle, nearest-neighbour in the
    en-face plane.
    """
    labels = _labels(l)
    depth, _, width = labels.shape
    angles, w, d = circle_points(cfg, spacing)
    bad = np.flatnonzero((w < 0) | (w >= width) | (d < 0) | (d >= depth))
    if bad.size:
        a = float(angles[bad[0]])
        raise GeometryError(
            f"circle leaves the volume at angle {a:.2f} deg (w={w[bad[0]]}, d={d[bad[0]]}, "
            f"en-face extent W={width}, D={depth})",
            angle_deg=a,
        )
    return [labels[dd, :, ww].copy() for ww, dd in zip(w, d)]


def thickness(ascan: np.ndarray, class_id: int, axial_um: float) -> ThicknessMeasurement:
    """Thickness of the topmost contiguous run of ``class_id`` in a column."""
    idx = np.flatnonzero(np.asarray(ascan) == class_id)
    if idx.size == 0:
        return ThicknessMeasurement(0.0, missing=True)
    breaks = np.flatnonzero(np.diff(idx) != 1)
    top = idx[0]
    bottom = idx[breaks[0]] if breaks.size else idx[-1]
    return ThicknessMeasurement(float((bottom - top + 1) * axial_um),
                                noncontiguous=bool(breaks.size))


def thickness_profile(l, spacing: VoxelSpacing, cfg: CircularScanConfig,
                      kind: str = "p-RNFLT") -> ThicknessProfile:
    if kind not in PARAMETER_CLASSES:
        raise ValueError(f"unknown parameter {kind!r}; expected one of {list(PARAMETER_CLASSES)}")
    cls = PARAMETER_CLASSES[kind]
    angles, _, _ = circle_points(cfg, spacing)
    cols = circular_scan(l, spacing, cfg)
    ms = [thickness(c, cls, spacing.axial_um) for c in cols]
    return ThicknessProfile(
        kind=kind,
        angles_deg=[float(a) for a in angles],
        thickness_um=[m.thickness_um for m in ms],
        missing=[m.missing for m in ms],
        noncontiguous=[m.noncontiguous for m in ms],
    )


def onh_center(l) -> tuple[float, float]:
    """Default ONH centre: en-face centroid of the class-1 thickness map.

    Columns are weighted by their RNFL+prelamina voxel count, which pulls
    the centroid toward the thick prelaminar tissue inside the canal.
    Falls back to the geometric centre when class 1 is absent.
    """
    labels = _labels(l)
    depth, _, width = labels.shape
    weight = np.sum(labels == RNFL, axis=1).astype(np.float64)  # (D, W)
    total = weight.sum()
    if total == 0:
        return ((width - 1) / 2.0, (depth - 1) / 2.0)
    dd, ww = np.mgrid[0:depth, 0:width]
    return (float((ww * weight).sum() / total), float((dd * weight).sum() / total))


def extract_parameters(l, spacing: VoxelSpacing | None = None,
                       center: tuple[float, float] | None = None,
                       diameter_mm: float = 3.4, samples: int = 360) -> dict:
    """p-RNFLT and p-GCCT profiles for one label volume."""
    if spacing is None:
        spacing = l.spacing if isinstance(l, LabelVolume) else VoxelSpacing()
    if center is None:
        center = onh_center(l)
    cfg = CircularScanConfig(tuple(center), diameter_mm, samples)
    out = {
        "center": list(cfg.center),
        "diameter_mm": diameter_mm,
        "samples": samples,
        "spacing_um": list(spacing.as_tuple()),
    }
    for kind in PARAMETER_CLASSES:
        out[kind] = thickness_profile(l, spacing, cfg, kind).to_dict()
    return out


def icc(a: Sequence[float], b: Sequence[float]) -> float:
    """ICC(2,1) between two raters from the two-way ANOVA mean squares."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"measurements must be 1D of equal length, got {a.shape}, {b.shape}")
    n, k = a.size, 2
    if n < 2:
        raise ValueError("ICC needs at least 2 subjects")
    x = np.stack([a, b], axis=1)
    row_mean = x.mean(axis=1)
    col_mean = x.mean(axis=0)
    grand = col_mean.mean()
    # residuals formed directly (not by subtraction of sums) so that
    # identical raters give exactly zero error
    resid = (x - row_mean[:, None]) - (col_mean - grand)[None, :]
    ms_rows = k * np.sum((row_mean - grand) ** 2) / (n - 1)
    ms_cols = n * np.sum((col_mean - grand) ** 2) / (k - 1)
    ms_err = np.sum(resid ** 2) / ((n - 1) * (k - 1))
    denom = ms_rows + (k - 1) * ms_err + k * (ms_cols - ms_err) / n
    if denom == 0:
        raise ValueError("ICC undefined: no between-subject or rater variance")
    return float((ms_rows - ms_err) / denom)
