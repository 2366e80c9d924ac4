"""On-disk datasets: a directory of ``<name>.ovb`` volumes with optional
``<name>.labels.ovb`` ground truth next to each."""

from __future__ import annotations

from pathlib import Path

from ..volcore import LabelVolume, OctVolume, load_labels, load_volume, save_labels, save_volume

LABEL_SUFFIX = ".labels.ovb"
VOLUME_SUFFIX = ".ovb"


def volume_names(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    names = [p.name[: -len(VOLUME_SUFFIX)] for p in root.iterdir()
             if p.name.endswith(VOLUME_SUFFIX) and not p.name.endswith(LABEL_SUFFIX)]
    return sorted(names)


def load_dataset(root, require_labels: bool = True) -> dict[str, tuple[OctVolume, LabelVolume | None]]:
    """Volumes keyed by name in sorted order."""
    root = Path(root)
    out = {}
    for name in volume_names(root):
        lab_path = root / f"{name}{LABEL_SUFFIX}"
        if require_labels and not lab_path.exists():
            raise FileNotFoundError(f"missing labels for {name}: {lab_path}")
        lab = load_labels(lab_path) if lab_path.exists() else None
        out[name] = (load_volume(root / f"{name}{VOLUME_SUFFIX}"), lab)
    if not out:
        raise ValueError(f"no {VOLUME_SUFFIX} volumes in {root}")
    return out


def save_pair(root, name: str, v: OctVolume, l: LabelVolume | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_volume(v, root / f"{name}{VOLUME_SUFFIX}")
    if l is not None:
        save_labels(l, root / f"{name}{LABEL_SUFFIX}")
