"""Cross-validated experiment runner.

A run is described by one JSON config.  Stages run in order: data,
enhance, train (optional), segment, evaluate, extract-params.  Each fold
trains on its training subjects and scores its held-out subjects; when a
baseline arm is requested the same folds are also run on unenhanced
volumes and the per-volume mean Dice of the two arms is compared with a
paired t-test.

The report holds only deterministic quantities.  Wall-clock timings go
to a separate sidecar file so that two runs of one config produce
byte-identical reports.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .._torch import apply_thread_cap, derive_seed
from ..clinical import ICC_VARIANT, PARAMETER_CLASSES, extract_parameters, icc, onh_center
from ..enhance import EnhanceConfig, enhance_volume
from ..segeval import SCORED_CLASSES, paired_ttest, score_all
from ..volcore import CLASS_NAMES, LabelVolume, OctVolume, VoxelSpacing, resize_labels, resize_volume
from .dataset import load_dataset
from .folds import make_folds
from .phantom import PhantomSpec, gen_phantom, subject_specs

log = logging.getLogger(__name__)

REPORT_VERSION = 1
DETERMINISM_RTOL = 1e-6

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "source": "phantom",  # or "directory"
        "path": None,
        "subjects": 20,
        "phantom": {"spacing": [3.87, 150.0, 300.0]},
        "resize": None,  # [H, W, D]
    },
    "enhance": {
        "enabled": True,
        "method": "digital",  # or "network"
        "contrast_exponent": 2.0,
        "clahe_clip": 2.0,
        "clahe_tiles": [8, 8],
        "averaging_mode": "exclude_center",
        "checkpoint": None,
    },
    "baseline": True,
    "train": {
        "enabled": True,
        "width_scale": 0.1,
        "fe_types": [1, 2, 3],
        "cnn": {"epochs": 50, "optimizer": "sgd", "lr": 0.01, "momentum": 0.05, "nesterov": True},
        "ensembler": {"epochs": 20, "optimizer": "sgd", "lr": 0.01, "momentum": 0.05,
                      "nesterov": True, "dropout": 0.5},
        "augment": None,
    },
    "segment": {"checkpoint": None},
    "clinical": {"enabled": True, "diameter_mm": 3.4, "samples": 360, "center": None},
    "output": {"report": "report.json", "timings": "timings.json", "scores_csv": None,
               "checkpoints": None},
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A stage failed; ``stage`` names it and the original error is chained."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _merge(base: dict, override: dict, where: str = "config") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict) and isinstance(val, dict) and key != "phantom":
            out[key] = _merge(base[key], val, f"{where}.{key}")
        elif key == "phantom":
            out[key] = {**base[key], **(val or {})}
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(source) -> tuple[dict, Path]:
    """Merged config and the directory relative paths resolve against."""
    if isinstance(source, dict):
        return _merge(DEFAULT_CONFIG, source), Path.cwd()
    path = Path(source)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return _merge(DEFAULT_CONFIG, raw), path.resolve().parent


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def _resolve(base: Path, p):
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else base / p


# ---------------------------------------------------------------------------
# Stages


def _load_subjects(cfg: dict, base: Path) -> dict[str, tuple[OctVolume, LabelVolume]]:
    data = cfg["data"]
    if data["source"] == "phantom":
        spec = PhantomSpec.from_dict(data["phantom"])
        specs = subject_specs(int(data["subjects"]), spec, derive_seed(cfg["seed"], "phantom"))
        subjects = {f"subject-{i:03d}": gen_phantom(s) for i, s in enumerate(specs)}
    elif data["source"] == "directory":
        root = _resolve(base, data["path"])
        subjects = load_dataset(root, require_labels=True)
    else:
        raise ConfigError(f"data.source must be 'phantom' or 'directory', got {data['source']!r}")
    if data["resize"] is not None:
        target = tuple(int(x) for x in data["resize"])
        subjects = {k: (resize_volume(v, target), resize_labels(l, target))
                    for k, (v, l) in subjects.items()}
    return subjects


def _enhancer(cfg: dict, base: Path):
    enh = cfg["enhance"]
    if enh["method"] == "digital":
        ec = EnhanceConfig(enh["contrast_exponent"], enh["clahe_clip"],
                           tuple(enh["clahe_tiles"]), enh["averaging_mode"])
        return lambda vox: enhance_volume(vox, ec)
    if enh["method"] == "network":
        from ..enhancer_net import enhance_with_net, load_enhancer
        net = load_enhancer(_resolve(base, enh["checkpoint"]))
        return lambda vox: np.clip(enhance_with_net(net, vox), 0.0, 1.0)
    raise ConfigError(f"enhance.method must be 'digital' or 'network', got {enh['method']!r}")


def _train_configs(tcfg: dict, seed: int):
    from ..onhnet import SegTrainConfig
    from .augment import AugmentSpec

    aug = None
    if tcfg["augment"]:
        a = dict(tcfg["augment"])
        for key in ("rotation", "gamma", "occlusion_size"):
            if key in a:
                a[key] = tuple(a[key])
        aug = AugmentSpec(**a)
    c, e = tcfg["cnn"], tcfg["ensembler"]
    cnn_cfg = SegTrainConfig(epochs=c["epochs"], optimizer=c["optimizer"], lr=c["lr"],
                             momentum=c["momentum"], nesterov=c["nesterov"], seed=seed, augment=aug)
    ens_cfg = SegTrainConfig(epochs=e["epochs"], optimizer=e["optimizer"], lr=e["lr"],
                             momentum=e["momentum"], nesterov=e["nesterov"], seed=seed, augment=aug)
    return cnn_cfg, ens_cfg


def _scores_dict(s) -> dict:
    return {CLASS_NAMES[t.class_id]: {"dice": t.dice, "sensitivity": t.sensitivity,
                                      "specificity": t.specificity} for t in s.scores}


def _global(params: dict, kind: str):
    g = params[kind]["global_um"]
    return None if g is None else float(g)


# ---------------------------------------------------------------------------


def run_experiment(config, out_dir=None) -> dict:
    """Run every configured stage; returns the report and writes it (plus
    timings and optional CSV) when output paths are set."""
    apply_thread_cap()
    cfg, base = load_config(config)
    out_base = Path(out_dir) if out_dir is not None else base
    seed = int(cfg["seed"])
    timings: dict[str, float] = {}

    with _stage("data", timings):
        subjects = _load_subjects(cfg, base)
        names = list(subjects)
        plan = make_folds(names, seed)

    arms = {}
    with _stage("enhance", timings):
        if cfg["enhance"]["enabled"]:
            fn = _enhancer(cfg, base)
            arms["enhanced"] = {n: fn(np.asarray(v.voxels)) for n, (v, _) in subjects.items()}
        if cfg["baseline"] or not arms:
            arms["baseline"] = {n: np.asarray(v.voxels, dtype=np.float64) for n, (v, _) in subjects.items()}
    primary = next(iter(arms))

    from ..onhnet import EnsemblerSpec, argmax_labels, load_onh_net, predict_proba, save_onh_net, train_seg

    tcfg = cfg["train"]
    fixed_net = None
    if not tcfg["enabled"]:
        with _stage("train", timings):
            ck = cfg["segment"]["checkpoint"]
            if ck is None:
                raise ConfigError("segment.checkpoint is required when training is disabled")
            fixed_net = load_onh_net(_resolve(base, ck))

    ckpt_root = _resolve(out_base, cfg["output"]["checkpoints"])
    truth = {n: l.labels for n, (_, l) in subjects.items()}
    predictions = {arm: {} for arm in arms}
    folds_out = []
    per_volume = {arm: {} for arm in arms}

    for fold in plan:
        fold_out = {"index": fold.index, "train": list(fold.train), "test": list(fold.test), "arms": {}}
        train_seed = derive_seed(seed, f"train-fold{fold.index}")
        for arm, vols in arms.items():
            net = fixed_net
            if tcfg["enabled"]:
                with _stage("train", timings):
                    X = np.stack([vols[n] for n in fold.train])
                    Y = np.stack([truth[n] for n in fold.train])
                    cnn_cfg, ens_cfg = _train_configs(tcfg, train_seed)
                    ens_spec = EnsemblerSpec(width_scale=tcfg["width_scale"],
                                             dropout=tcfg["ensembler"]["dropout"],
                                             n_inputs=len(tcfg["fe_types"]))
                    res = train_seg(X, Y, tcfg["width_scale"], tuple(tcfg["fe_types"]),
                                    cnn_cfg, ens_cfg, train_seed, ens_spec)
                    net = res.onh
                    if ckpt_root is not None:
                        save_onh_net(net, ckpt_root / arm / f"fold{fold.index}", train_seed)
            with _stage("segment", timings):
                X_test = np.stack([vols[n] for n in fold.test])
                labels = argmax_labels(predict_proba(net, X_test))
                for n, lab in zip(fold.test, labels):
                    predictions[arm][n] = lab
            with _stage("evaluate", timings):
                per_subject = {}
                sets = []
                for n in fold.test:
                    s = score_all(predictions[arm][n], truth[n])
                    sets.append(s)
                    per_subject[n] = _scores_dict(s)
                    per_volume[arm][n] = s.mean_dice
                tissues = {}
                for k, c in enumerate(SCORED_CLASSES):
                    tissues[CLASS_NAMES[c]] = {
                        m: float(np.mean([getattr(s.scores[k], m) for s in sets]))
                        for m in ("dice", "sensitivity", "specificity")
                    }
                fold_out["arms"][arm] = {
                    "tissues": tissues,
                    "mean_dice": float(np.mean([s.mean_dice for s in sets])),
                    "subjects": per_subject,
                }
        folds_out.append(fold_out)

    report = {
        "format_version": REPORT_VERSION,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seeds": {
            "experiment": seed,
            "phantom": derive_seed(seed, "phantom"),
            "folds": derive_seed(seed, "folds"),
            "train": {f"fold{f.index}": derive_seed(seed, f"train-fold{f.index}") for f in plan},
        },
        "determinism_rtol": DETERMINISM_RTOL,
        "subjects": names,
        "arms": list(arms),
        "primary_arm": primary,
        "folds": folds_out,
        "per_volume_mean_dice": {arm: {n: per_volume[arm][n] for n in names} for arm in arms},
    }

    with _stage("evaluate", timings):
        if "enhanced" in arms and "baseline" in arms:
            a = [per_volume["enhanced"][n] for n in names]
            b = [per_volume["baseline"][n] for n in names]
            t = paired_ttest(a, b)
            report["comparison"] = {
                "test": "paired t-test, enhanced vs baseline per-volume mean Dice",
                "n": len(names),
                "mean_enhanced": float(np.mean(a)),
                "mean_baseline": float(np.mean(b)),
                "statistic": t.statistic if math.isfinite(t.statistic) else str(t.statistic),
                "pvalue": t.pvalue,
                "degenerate": t.degenerate,
            }

    if cfg["clinical"]["enabled"]:
        with _stage("extract-params", timings):
            report["clinical"] = _clinical(cfg["clinical"], subjects, predictions[primary], names)

    _write_outputs(report, timings, cfg["output"], out_base)
    return report


def _clinical(ccfg: dict, subjects, predicted, names) -> dict:
    out = {"diameter_mm": ccfg["diameter_mm"], "samples": ccfg["samples"], "subjects": {}}
    values = {kind: ([], []) for kind in PARAMETER_CLASSES}
    for n in names:
        l = subjects[n][1]
        spacing: VoxelSpacing = l.spacing
        center = tuple(ccfg["center"]) if ccfg["center"] is not None else onh_center(l)
        manual = extract_parameters(l, spacing, center, ccfg["diameter_mm"], ccfg["samples"])
        dl = extract_parameters(predicted[n], spacing, center, ccfg["diameter_mm"], ccfg["samples"])
        entry = {"center": list(center)}
        for kind in PARAMETER_CLASSES:
            g_dl, g_m = _global(dl, kind), _global(manual, kind)
            entry[kind] = {"dl_um": g_dl, "manual_um": g_m}
            if g_dl is not None and g_m is not None:
                values[kind][0].append(g_dl)
                values[kind][1].append(g_m)
        out["subjects"][n] = entry
    out["icc"] = {"variant": ICC_VARIANT}
    for kind, (a, b) in values.items():
        try:
            out["icc"][kind] = {"value": icc(a, b), "n": len(a)}
        except ValueError as exc:
            out["icc"][kind] = {"value": None, "n": len(a), "reason": str(exc)}
    return out


def _write_outputs(report: dict, timings: dict, ocfg: dict, base: Path) -> None:
    rp = _resolve(base, ocfg["report"])
    if rp is not None:
        rp.parent.mkdir(parents=True, exist_ok=True)
        rp.write_text(json.dumps(report, indent=2, sort_keys=True))
    tp = _resolve(base, ocfg["timings"])
    if tp is not None:
        tp.parent.mkdir(parents=True, exist_ok=True)
        tp.write_text(json.dumps({"config_hash": report["config_hash"],
                                  "seconds": {k: round(v, 6) for k, v in timings.items()}},
                                 indent=2, sort_keys=True))
    cp = _resolve(base, ocfg["scores_csv"])
    if cp is not None:
        cp.parent.mkdir(parents=True, exist_ok=True)
        with open(cp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arm", "fold", "subject", "tissue", "dice", "sensitivity", "specificity"])
            for f in report["folds"]:
                for arm, a in f["arms"].items():
                    for subj, tissues in a["subjects"].items():
                        for tissue, s in tissues.items():
                            w.writerow([arm, f["index"], subj, tissue,
                                        repr(s["dice"]), repr(s["sensitivity"]), repr(s["specificity"])])
