"""Synthetic layered ONH phantoms with exact ground-truth labels.

Each en-face column ``(w, d)`` is a stack of tissue layers whose
thicknesses vary smoothly across the volume.  Inside the neural canal the
retinal layers are replaced by prelaminar tissue (class 1) sitting on the
lamina cribrosa (class 6), and the surface dips to form the cup.  Device
profiles A/B/C change the contrast curve, depth attenuation, speckle grain
and offset so that the same anatomy looks different per "scanner".
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .._torch import derive_seed
from ..volcore import LabelVolume, OctVolume, VoxelSpacing

VITREOUS, RNFL, GCC, RETINA, RPE, CHOROID, LC, NOISE = range(8)
STACK = (VITREOUS, RNFL, GCC, RETINA, RPE, CHOROID)

BASE_INTENSITY = {
    VITREOUS: 0.04, RNFL: 0.78, GCC: 0.46, RETINA: 0.30,
    RPE: 0.92, CHOROID: 0.52, LC: 0.60, NOISE: 0.10,
}


@dataclass(frozen=True)
class DeviceProfile:
    gamma: float
    gain: float
    offset: float
    attenuation: float
    grain: float


DEVICE_PROFILES = {
    "A": DeviceProfile(gamma=1.0, gain=1.0, offset=0.00, attenuation=1.0, grain=0.0),
    "B": DeviceProfile(gamma=0.6, gain=0.80, offset=0.06, attenuation=2.5, grain=1.0),
    "C": DeviceProfile(gamma=1.7, gain=1.10, offset=0.02, attenuation=0.4, grain=2.0),
}


class InfeasiblePhantomError(ValueError):
    pass


def _default_thickness():
    return {VITREOUS: (4, 6), RNFL: (3, 5), GCC: (2, 4), RETINA: (3, 5),
            RPE: (2, 2), CHOROID: (3, 5), LC: (3, 3)}


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom geometry and appearance.

    ``dims`` is (H, W, D).  ``thickness`` maps class id to an inclusive
    (min, max) voxel range; classes 0-5 form the layer stack, class 6 is
    the lamina thickness inside the canal and everything below is noise.
    ``cup_radius`` is in en-face voxels (0 disables the canal).
    """

    dims: tuple[int, int, int] = (32, 32, 16)
    thickness: dict = field(default_factory=_default_thickness)
    cup_depth: int = 3
    cup_radius: float = 5.0
    cup_center: tuple[float, float] | None = None
    waviness: float = 1.0
    noise: float = 0.1
    profile: str = "A"
    attenuation: float | None = None
    vessels: int = 2
    spacing: VoxelSpacing = field(default_factory=lambda: VoxelSpacing(3.87, 11.7, 30.0))
    seed: int = 0

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise level must be >= 0")
        if self.profile not in DEVICE_PROFILES:
            raise ValueError(f"profile must be one of {sorted(DEVICE_PROFILES)}")
        h, w, d = self.dims
        if min(h, w, d) < 1:
            raise ValueError("phantom dims must be >= 1")
        for c in STACK + (LC,):
            lo, hi = self.thickness.get(c, (0, 0))
            if lo < 0 or hi < lo:
                raise InfeasiblePhantomError(f"bad thickness range for class {c}: {(lo, hi)}")
        stack_max = sum(self.thickness[c][1] for c in STACK)
        canal_max = stack_max + self.thickness.get(LC, (0, 0))[1]
        if stack_max + int(np.ceil(self.waviness)) > h:
            raise InfeasiblePhantomError(
                f"layer thicknesses (max {stack_max}) plus waviness exceed height {h}")
        if self.cup_radius > 0 and canal_max + int(np.ceil(self.waviness)) > h:
            raise InfeasiblePhantomError(
                f"canal stack (max {canal_max}) plus waviness exceeds height {h}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thickness"] = {str(k): list(v) for k, v in self.thickness.items()}
        d["spacing"] = list(self.spacing.as_tuple())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "thickness" in d:
            d["thickness"] = {int(k): tuple(v) for k, v in d["thickness"].items()}
        if "spacing" in d and not isinstance(d["spacing"], VoxelSpacing):
            d["spacing"] = VoxelSpacing(*d["spacing"])
        for key in ("dims", "cup_center"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _smooth_field(rng: np.random.Generator, d: int, w: int, n_waves: int = 3) -> np.ndarray:
    """Smooth en-face field in [0, 1] built from a few random low-frequency cosines."""
    dd, ww = np.mgrid[0:d, 0:w]
    acc = np.zeros((d, w))
    for _ in range(n_waves):
        fd, fw = rng.uniform(0.3, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        acc += np.cos(2 * np.pi * (fd * dd / max(d, 1) + fw * ww / max(w, 1)) + phase)
    span = acc.max() - acc.min()
    return (acc - acc.min()) / span if span > 0 else np.full((d, w), 0.5)


def _layer_thickness(rng, rng_range, d, w) -> np.ndarray:
    lo, hi = rng_range
    f = _smooth_field(rng, d, w)
    return lo + np.rint((hi - lo) * f).astype(int)


def generate_labels(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Label array ``(D, H, W)`` and the per-column retinal surface index."""
    h, w, d = spec.dims
    thick = {c: _layer_thickness(rng, spec.thickness[c], d, w) for c in STACK}
    wave = np.rint(spec.waviness * _smooth_field(rng, d, w)).astype(int)
    surface = thick[VITREOUS] + wave

    if spec.cup_center is None:
        cw, cd = (w - 1) / 2.0, (d - 1) / 2.0
    else:
        cw, cd = spec.cup_center
    dd, ww = np.mgrid[0:d, 0:w]
    r = np.hypot(ww - cw, dd - cd)
    canal = (r < spec.cup_radius) if spec.cup_radius > 0 else np.zeros((d, w), bool)

    z = np.arange(h)[None, :, None]  # broadcast to (D, H, W)
    labels = np.full((d, h, w), NOISE, dtype=np.uint8)
    top = surface
    bounds = {}
    for c in STACK[1:]:
        bottom = top + thick[c]
        bounds[c] = (top, bottom)
        top = bottom
    labels[z < surface[:, None, :]] = VITREOUS
    for c, (t0, t1) in bounds.items():
        m = (z >= t0[:, None, :]) & (z < t1[:, None, :])
        labels[m] = c

    if canal.any():
        lc_top = top  # bottom of the choroid
        lc_t = spec.thickness[LC][0] + np.rint(
            (spec.thickness[LC][1] - spec.thickness[LC][0]) * _smooth_field(rng, d, w)).astype(int)
        cup = np.rint(spec.cup_depth * np.clip(1 - (r / max(spec.cup_radius, 1e-9)) ** 2, 0, 1)).astype(int)
        cup_surface = np.minimum(surface + cup, lc_top - 1)
        col = canal[:, None, :]
        labels[col & (z < cup_surface[:, None, :])] = VITREOUS
        pre = (z >= cup_surface[:, None, :]) & (z < lc_top[:, None, :])
        labels[col & pre] = RNFL
        lam = (z >= lc_top[:, None, :]) & (z < (lc_top + lc_t)[:, None, :])
        labels[col & lam] = LC
        labels[col & (z >= (lc_top + lc_t)[:, None, :])] = NOISE
        surface = np.where(canal, cup_surface, surface)
    return labels, surface


def render_intensities(labels: np.ndarray, surface: np.ndarray, spec: PhantomSpec,
                       rng: np.random.Generator) -> np.ndarray:
    prof = DEVICE_PROFILES[spec.profile]
    alpha = prof.attenuation if spec.attenuation is None else spec.attenuation
    d, h, w = labels.shape
    base = np.zeros(labels.shape, dtype=np.float64)
    for c, v in BASE_INTENSITY.items():
        base[labels == c] = v

    z = np.arange(h)[None, :, None]
    below = np.clip(z - surface[:, None, :], 0, None) / max(h, 1)
    sig = base * np.exp(-alpha * below)

    if spec.vessels:
        shade = np.ones((d, h, w))
        for _ in range(spec.vessels):
            wc = rng.integers(0, w)
            half = max(1, w // 40)
            cols = slice(max(0, wc - half), min(w, wc + half + 1))
            deeper = (labels != VITREOUS) & (labels != RNFL)
            shade[:, :, cols] = np.where(deeper[:, :, cols], 0.45, 1.0)
        sig = sig * shade

    sig = prof.offset + prof.gain * sig ** prof.gamma
    if spec.noise > 0:
        n = rng.standard_normal(labels.shape)
        if prof.grain > 0:
            n = gaussian_filter(n, sigma=(0, prof.grain, prof.grain))
            n /= max(n.std(), 1e-12)
        sig = sig * (1.0 + spec.noise * n)
    return np.clip(sig, 0.0, 1.0)


def gen_phantom(spec: PhantomSpec = PhantomSpec()) -> tuple[OctVolume, LabelVolume]:
    """Deterministic (volume, labels) pair for ``spec``."""
    geo_rng = np.random.default_rng(derive_seed(spec.seed, "geometry"))
    app_rng = np.random.default_rng(derive_seed(spec.seed, "appearance"))
    labels, surface = generate_labels(spec, geo_rng)
    vox = render_intensities(labels, surface, spec, app_rng)
    return OctVolume(vox, spec.spacing), LabelVolume(labels, spec.spacing)


def matched_profiles(spec: PhantomSpec, profiles=("A", "B", "C")):
    """Same anatomy and noise draw rendered under several device profiles."""
    return {p: gen_phantom(replace(spec, profile=p)) for p in profiles}


def subject_specs(n: int, base: PhantomSpec, seed: int) -> list[PhantomSpec]:
    """Per-subject specs differing only in their derived seeds."""
    return [replace(base, seed=derive_seed(seed, f"subject-{i}")) for i in range(n)]
