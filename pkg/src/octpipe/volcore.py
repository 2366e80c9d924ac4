"""Volume and B-scan data model, OVB file I/O and grid resampling.

Voxel arrays are stored B-scan-major with shape ``(depth, height, width)``
so that ``voxels[d]`` is the d-th B-scan and the flat index of voxel
``(h, w, d)`` is ``d*H*W + h*W + w``.  Dimension tuples passed to the
resize helpers follow the (height, width, depth) convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CLASS_NAMES = (
    "vitreous",
    "RNFL+prelamina",
    "GCC",
    "other-retinal",
    "RPE",
    "choroid",
    "LC",
    "noise",
)
NUM_CLASSES = len(CLASS_NAMES)

OVB_MAGIC = b"OVB1"
_HEADER = struct.Struct("<4sIIIB3f")
HEADER_SIZE = _HEADER.size  # 29 bytes
DTYPE_F32 = 0
DTYPE_U8 = 1


class OVBFormatError(ValueError):
    """Malformed OVB magic or header."""


class OVBTruncationError(OVBFormatError):
    """Voxel payload length does not match the header."""


class OVBDataError(OVBFormatError):
    """Payload decodes to invalid voxel values."""


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class VoxelSpacing:
    """Micrometres per voxel step along each axis.

    Values are rounded to float32 on construction so that they survive an
    OVB round trip unchanged.
    """

    axial_um: float = 1.0
    lateral_um: float = 1.0
    bscan_um: float = 1.0

    def __post_init__(self):
        for name in ("axial_um", "lateral_um", "bscan_um"):
            value = _f32(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"spacing {name} must be > 0, got {value}")
            object.__setattr__(self, name, value)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.axial_um, self.lateral_um, self.bscan_um)


def _check_intensities(arr: np.ndarray, what: str) -> None:
    if arr.size == 0 or min(arr.shape) < 1:
        raise ValueError(f"{what} dimensions must all be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite intensities")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{what} intensities must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class BScan:
    """2D intensity slice of shape ``(height, width)`` in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float32, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"B-scan must be 2D, got shape {arr.shape}")
        _check_intensities(arr, "B-scan")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class OctVolume:
    """Immutable 3D intensity grid, array shape ``(depth, height, width)``."""

    voxels: np.ndarray
    spacing: VoxelSpacing = field(default_factory=VoxelSpacing)

    def __post_init__(self):
        arr = np.array(self.voxels, dtype=np.float32, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {arr.shape}")
        _check_intensities(arr, "volume")
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)
        if not isinstance(self.spacing, VoxelSpacing):
            object.__setattr__(self, "spacing", VoxelSpacing(*self.spacing))

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        """(height, width, depth)."""
        return (self.height, self.width, self.depth)

    def __eq__(self, other):
        if not isinstance(other, OctVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.voxels, other.voxels)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Per-voxel class ids in ``0..7``, array shape ``(depth, height, width)``."""

    labels: np.ndarray
    spacing: VoxelSpacing = field(default_factory=VoxelSpacing)
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise ValueError(f"label volume must be 3D with dims >= 1, got {raw.shape}")
        if raw.dtype.kind == "f" and not np.array_equal(raw, np.round(raw)):
            raise ValueError("label ids must be integers")
        if raw.min() < 0 or raw.max() >= NUM_CLASSES:
            raise ValueError(f"label ids must lie in 0..{NUM_CLASSES - 1}")
        arr = raw.astype(np.uint8, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)
        if not isinstance(self.spacing, VoxelSpacing):
            object.__setattr__(self, "spacing", VoxelSpacing(*self.spacing))

    @property
    def height(self) -> int:
        return self.labels.shape[1]

    @property
    def width(self) -> int:
        return self.labels.shape[2]

    @property
    def depth(self) -> int:
        return self.labels.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.depth)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.labels, other.labels)


# ---------------------------------------------------------------------------
# OVB I/O


def _write_ovb(path, payload: np.ndarray, dtype_code: int, spacing: VoxelSpacing) -> None:
    d, h, w = payload.shape
    header = _HEADER.pack(OVB_MAGIC, h, w, d, dtype_code, *spacing.as_tuple())
    if dtype_code == DTYPE_F32:
        body = payload.astype("<f4", copy=False).tobytes(order="C")
    else:
        body = payload.astype(np.uint8, copy=False).tobytes(order="C")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def _read_ovb(path) -> tuple[np.ndarray, int, VoxelSpacing]:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise OVBFormatError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, h, w, d, code, *spacing = _HEADER.unpack_from(raw, 0)
    if magic != OVB_MAGIC:
        raise OVBFormatError(f"{path}: bad magic {magic!r}")
    if min(h, w, d) < 1:
        raise OVBFormatError(f"{path}: header dims must be >= 1, got H={h} W={w} D={d}")
    if code not in (DTYPE_F32, DTYPE_U8):
        raise OVBFormatError(f"{path}: unknown dtype code {code}")
    try:
        spacing = VoxelSpacing(*spacing)
    except ValueError as exc:
        raise OVBFormatError(f"{path}: {exc}") from None
    itemsize = 4 if code == DTYPE_F32 else 1
    expected = h * w * d * itemsize
    body = raw[HEADER_SIZE:]
    if len(body) != expected:
        raise OVBTruncationError(
            f"{path}: payload is {len(body)} bytes, header implies {expected}"
        )
    dt = np.dtype("<f4") if code == DTYPE_F32 else np.dtype(np.uint8)
    arr = np.frombuffer(body, dtype=dt).reshape(d, h, w)
    return arr, code, spacing


def save_volume(v: OctVolume, path) -> None:
    _write_ovb(path, v.voxels, DTYPE_F32, v.spacing)


def load_volume(path) -> OctVolume:
    arr, code, spacing = _read_ovb(path)
    if code != DTYPE_F32:
        raise OVBFormatError(f"{path}: expected intensity payload (dtype 0), got {code}")
    if not np.all(np.isfinite(arr)):
        raise OVBDataError(f"{path}: payload contains non-finite voxels")
    if arr.min() < 0 or arr.max() > 1:
        raise OVBDataError(f"{path}: intensities outside [0, 1]")
    return OctVolume(arr.astype(np.float32), spacing)


def save_labels(l: LabelVolume, path) -> None:
    _write_ovb(path, l.labels, DTYPE_U8, l.spacing)


def load_labels(path) -> LabelVolume:
    arr, code, spacing = _read_ovb(path)
    if code != DTYPE_U8:
        raise OVBFormatError(f"{path}: expected label payload (dtype 1), got {code}")
    if arr.max() >= NUM_CLASSES:
        raise OVBDataError(f"{path}: label id {int(arr.max())} out of range")
    return LabelVolume(arr.copy(), spacing)


# ---------------------------------------------------------------------------
# Resampling


def _check_target(target: Sequence[int]) -> tuple[int, int, int]:
    if len(target) != 3:
        raise ValueError(f"target must be (H, W, D), got {target!r}")
    h, w, d = (int(t) for t in target)
    if min(h, w, d) < 1:
        raise ValueError(f"target dims must be >= 1, got {target!r}")
    return h, w, d


def _linear_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    """Linear resampling along one axis using pixel-centre alignment."""
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a * (1.0 - frac) + b * frac


def _rescaled_spacing(spacing: VoxelSpacing, old, new) -> VoxelSpacing:
    (h0, w0, d0), (h1, w1, d1) = old, new
    return VoxelSpacing(
        spacing.axial_um * h0 / h1,
        spacing.lateral_um * w0 / w1,
        spacing.bscan_um * d0 / d1,
    )


def resize_volume(v: OctVolume, target: Sequence[int]) -> OctVolume:
    """Trilinear resize to ``target = (H, W, D)``; spacing is rescaled."""
    h, w, d = _check_target(target)
    if (h, w, d) == v.dims:
        return v
    arr = v.voxels.astype(np.float64)
    arr = _linear_axis(arr, d, 0)
    arr = _linear_axis(arr, h, 1)
    arr = _linear_axis(arr, w, 2)
    arr = np.clip(arr, 0.0, 1.0)
    return OctVolume(arr, _rescaled_spacing(v.spacing, v.dims, (h, w, d)))


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(int)
    return np.clip(idx, 0, n_in - 1)


def resize_labels(l: LabelVolume, target: Sequence[int]) -> LabelVolume:
    """Nearest-neighbour resize; never introduces new class ids."""
    h, w, d = _check_target(target)
    if (h, w, d) == l.dims:
        return l
    out = l.labels[np.ix_(
        _nearest_index(l.depth, d),
        _nearest_index(l.height, h),
        _nearest_index(l.width, w),
    )]
    return LabelVolume(out, _rescaled_spacing(l.spacing, l.dims, (h, w, d)), l.class_names)


# ---------------------------------------------------------------------------
# B-scan access


def _check_index(v: OctVolume, index: int) -> int:
    index = int(index)
    if not 0 <= index < v.depth:
        raise IndexError(f"B-scan index {index} out of range for depth {v.depth}")
    return index


def extract_bscan(v: OctVolume, index: int) -> BScan:
    return BScan(v.voxels[_check_index(v, index)])


def insert_bscan(v: OctVolume, index: int, b: BScan) -> OctVolume:
    """Return a copy of ``v`` with B-scan ``index`` replaced by ``b``."""
    index = _check_index(v, index)
    if (b.height, b.width) != (v.height, v.width):
        raise ValueError(
            f"B-scan shape {(b.height, b.width)} does not match volume {(v.height, v.width)}"
        )
    arr = v.voxels.copy()
    arr[index] = b.pixels
    return OctVolume(arr, v.spacing)


def iter_bscans(v: OctVolume):
    for d in range(v.depth):
        yield BScan(v.voxels[d])


def stack_bscans(bscans: Sequence[BScan], spacing: VoxelSpacing | None = None) -> OctVolume:
    arr = np.stack([b.pixels for b in bscans], axis=0)
    return OctVolume(arr, spacing or VoxelSpacing())
