"""Volume-consistent data augmentation.

One transform is sampled per call and applied identically to every B-scan
of the volume.  Geometric parts (horizontal flip, in-plane rotation) also
act on labels with nearest-neighbour interpolation; intensity parts (gamma,
additive speckle, occlusion patches) act on the volume only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import rotate

from ..volcore import LabelVolume, OctVolume


@dataclass(frozen=True)
class AugmentSpec:
    flip_prob: float = 0.0
    rotation: tuple[float, float] = (0.0, 0.0)  # degrees, sampled uniformly
    gamma: tuple[float, float] = (1.0, 1.0)
    speckle: float = 0.0
    occlusions: int = 0
    occlusion_size: tuple[int, int] = (4, 4)
    seed: int = 0

    def __post_init__(self):
        vals = (self.flip_prob, *self.rotation, *self.gamma, self.speckle)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("augmentation ranges must be finite")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip probability must be in [0, 1]")
        if self.rotation[0] > self.rotation[1] or self.gamma[0] > self.gamma[1]:
            raise ValueError("ranges must be (low, high) with low <= high")
        if self.gamma[0] <= 0 or self.speckle < 0 or self.occlusions < 0:
            raise ValueError("gamma must be > 0, speckle and occlusions >= 0")


@dataclass(frozen=True)
class AugmentTransform:
    flip: bool
    angle: float
    gamma: float
    speckle: float
    noise_seed: int
    boxes: tuple[tuple[int, int, int, int], ...]  # (row, col, height, width)


def sample_transform(spec: AugmentSpec, draw_seed: int, shape_hw=None) -> AugmentTransform:
    """Draw one transform; fully determined by ``(spec, draw_seed)``."""
    rng = np.random.default_rng([int(spec.seed) & 0xFFFFFFFF, int(draw_seed) & 0xFFFFFFFF])
    flip = bool(rng.random() < spec.flip_prob) if spec.flip_prob > 0 else False
    lo, hi = spec.rotation
    angle = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    glo, ghi = spec.gamma
    gamma = float(rng.uniform(glo, ghi)) if ghi > glo else float(glo)
    noise_seed = int(rng.integers(0, 2 ** 31))
    boxes = []
    if spec.occlusions and shape_hw is not None:
        h, w = shape_hw
        bh, bw = min(spec.occlusion_size[0], h), min(spec.occlusion_size[1], w)
        for _ in range(spec.occlusions):
            boxes.append((int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1)), bh, bw))
    return AugmentTransform(flip, angle, gamma, float(spec.speckle), noise_seed, tuple(boxes))


def apply_geometric(arr: np.ndarray, t: AugmentTransform, order: int) -> np.ndarray:
    """Flip and rotate every ``(H, W)`` slice of a ``(D, H, W)`` array."""
    out = arr
    if t.flip:
        out = out[:, :, ::-1]
    if t.angle != 0.0:
        out = rotate(out, t.angle, axes=(2, 1), reshape=False, order=order, mode="nearest")
    return np.ascontiguousarray(out)


def apply_intensity(arr: np.ndarray, t: AugmentTransform) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    if t.gamma != 1.0:
        out = out ** t.gamma
    if t.speckle > 0:
        noise = np.random.default_rng(t.noise_seed).standard_normal(out.shape[1:])
        out = out + t.speckle * noise[None]
    for r, c, bh, bw in t.boxes:
        out[:, r:r + bh, c:c + bw] = 0.0
    return np.clip(out, 0.0, 1.0)


def augment(v: OctVolume, l: LabelVolume | None, spec: AugmentSpec, draw_seed: int):
    """Return the augmented ``(volume, labels)``; labels may be ``None``."""
    if l is not None and l.labels.shape != v.voxels.shape:
        raise ValueError("volume and label dimensions differ")
    t = sample_transform(spec, draw_seed, (v.height, v.width))
    vox = apply_intensity(apply_geometric(v.voxels, t, order=1), t)
    out_v = OctVolume(vox, v.spacing)
    out_l = None
    if l is not None:
        out_l = LabelVolume(apply_geometric(l.labels, t, order=0), l.spacing, l.class_names)
    return out_v, out_l


def augment_arrays(vox: np.ndarray, labels: np.ndarray | None, spec: AugmentSpec, draw_seed: int):
    """Array-level variant used inside training loops."""
    t = sample_transform(spec, draw_seed, vox.shape[1:])
    out = apply_intensity(apply_geometric(vox, t, order=1), t)
    lab = apply_geometric(labels, t, order=0) if labels is not None else None
    return out, lab
