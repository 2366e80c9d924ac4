"""``octpipe`` command-line interface."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from ._torch import apply_thread_cap

log = logging.getLogger("octpipe")


def _dims(text: str, n: int, sep: str = "x") -> tuple[int, ...]:
    try:
        parts = tuple(int(p) for p in text.lower().split(sep))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {n} integers separated by {sep!r}, got {text!r}")
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"expected {n} integers separated by {sep!r}, got {text!r}")
    return parts


def _center(text: str) -> tuple[float, float]:
    try:
        w, d = (float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"center must be 'W,D', got {text!r}")
    return (w, d)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _finite(x):
    return x if isinstance(x, (int, float)) and math.isfinite(x) else str(x)


# ---------------------------------------------------------------------------
# Handlers


def cmd_enhance(args):
    from .enhance import EnhanceConfig, enhance_volume
    from .volcore import OctVolume, load_volume, save_volume

    cfg = EnhanceConfig(args.exponent, args.clip, args.tiles, args.averaging)
    v = load_volume(args.inp)
    save_volume(OctVolume(enhance_volume(v.voxels, cfg), v.spacing), args.out)


def cmd_metrics(args):
    from .qmetrics import volume_report
    from .volcore import load_volume

    a, b = load_volume(args.a), load_volume(args.b)
    _write_json(args.out, volume_report(a.voxels, b.voxels))


def _bscans(data_dir) -> np.ndarray:
    from .pipeline.dataset import load_dataset

    vols = load_dataset(data_dir, require_labels=False)
    shapes = {v.voxels.shape[1:] for v, _ in vols.values()}
    if len(shapes) != 1:
        raise ValueError(f"all B-scans must share one size, found {sorted(shapes)}")
    return np.concatenate([np.asarray(v.voxels, dtype=np.float64) for v, _ in vols.values()])


def cmd_train_enhancer(args):
    from .enhance import EnhanceConfig, enhance_volume
    from .enhancer_net import (EnhancerSpec, EnhancerTrainConfig, ExtractorSpec, save_enhancer,
                               train_enhancer)

    x = _bscans(args.data)
    y = enhance_volume(x, EnhanceConfig())
    steps = args.steps if args.steps is not None else args.epochs * len(x)
    spec = EnhancerSpec(width_scale=args.width_scale)
    cfg = EnhancerTrainConfig(steps=steps, lr=args.lr, seed=args.seed,
                              extractor=ExtractorSpec(width=args.extractor_width))
    res = train_enhancer(x, y, spec, cfg)
    save_enhancer(res.network, args.out, args.seed,
                  {"train": {"steps": steps, "lr": args.lr, "final_loss": res.step_losses[-1]}})


def cmd_enhance_net(args):
    from .enhancer_net import enhance_with_net, load_enhancer
    from .volcore import OctVolume, load_volume, save_volume

    net = load_enhancer(args.ckpt)
    v = load_volume(args.inp)
    out = np.clip(enhance_with_net(net, v.voxels), 0.0, 1.0)
    save_volume(OctVolume(out, v.spacing), args.out)


def _labelled(data_dir):
    from .pipeline.dataset import load_dataset

    data = load_dataset(data_dir, require_labels=True)
    X = np.stack([np.asarray(v.voxels) for v, _ in data.values()])
    Y = np.stack([l.labels for _, l in data.values()])
    return X, Y


def _seg_cfg(args):
    from .onhnet import SegTrainConfig

    return SegTrainConfig(epochs=args.epochs, optimizer=args.optimizer, lr=args.lr,
                          momentum=args.momentum, seed=args.seed)


def cmd_train_seg(args):
    from ._torch import derive_seed
    from .onhnet import SegCnnSpec, build_seg_cnn, save_seg_cnn, train_seg_cnn

    X, Y = _labelled(args.data)
    types = (1, 2, 3) if args.fe_type == "all" else (int(args.fe_type),)
    cfg = _seg_cfg(args)
    for t in types:
        init = derive_seed(args.seed, f"init-cnn{t}")
        net = build_seg_cnn(SegCnnSpec(fe_type=t, width_scale=args.scale), init)
        tl = train_seg_cnn(net, X, Y, cfg)
        save_seg_cnn(net, Path(args.out) / f"cnn{t}", args.seed,
                     {"train": {"epoch_losses": tl.epoch_losses, "optimizer": cfg.optimizer,
                                "lr": cfg.lr, "epochs": cfg.epochs}})
        log.info("type %d final loss %.5f", t, tl.epoch_losses[-1])


def cmd_train_ensemble(args):
    from ._torch import derive_seed
    from .onhnet import EnsemblerSpec, build_onh_net, load_seg_cnn, save_onh_net, train_ensembler

    root = Path(args.cnns)
    dirs = sorted(p for p in root.iterdir() if (p / "spec.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no CNN checkpoints under {root}")
    cnns = [load_seg_cnn(p) for p in dirs]
    scale = cnns[0].spec.width_scale
    spec = EnsemblerSpec(width_scale=scale, dropout=args.dropout, n_inputs=len(cnns))
    onh = build_onh_net(cnns, spec, derive_seed(args.seed, "init-ensembler"))
    X, Y = _labelled(args.data)
    tl = train_ensembler(onh, X, Y, _seg_cfg(args))
    save_onh_net(onh, args.out, args.seed, {"train": {"epoch_losses": tl.epoch_losses}})


def cmd_segment(args):
    from .onhnet import load_onh_net, segment
    from .volcore import LabelVolume, load_volume, save_labels

    net = load_onh_net(args.ckpt)
    v = load_volume(args.inp)
    probs, labels = segment(net, v.voxels)
    save_labels(LabelVolume(labels, v.spacing), args.out)
    if args.probs:
        np.save(args.probs, probs.astype(np.float32))


def cmd_evaluate(args):
    from .pipeline.dataset import LABEL_SUFFIX
    from .segeval import score_all
    from .volcore import load_labels

    pred, truth = Path(args.pred), Path(args.truth)
    if pred.is_dir():
        names = sorted(p.name[: -len(LABEL_SUFFIX)] for p in pred.glob(f"*{LABEL_SUFFIX}"))
        if not names:
            raise FileNotFoundError(f"no *{LABEL_SUFFIX} files in {pred}")
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["volume", "tissue", "dice", "sensitivity", "specificity"])
            for n in names:
                s = score_all(load_labels(pred / f"{n}{LABEL_SUFFIX}"),
                              load_labels(truth / f"{n}{LABEL_SUFFIX}"))
                for t in s.scores:
                    w.writerow([n, t.name, repr(t.dice), repr(t.sensitivity), repr(t.specificity)])
        return
    s = score_all(load_labels(pred), load_labels(truth))
    _write_json(args.out, s.to_dict())


def cmd_extract_params(args):
    from .clinical import extract_parameters
    from .volcore import load_labels

    l = load_labels(args.labels)
    params = extract_parameters(l, l.spacing, args.center, args.diameter_mm, args.samples)
    _write_json(args.out, params)


def cmd_agreement(args):
    from .clinical import ICC_VARIANT, PARAMETER_CLASSES, icc
    from .segeval import paired_ttest

    a = json.loads(Path(args.a).read_text())
    b = json.loads(Path(args.b).read_text())
    out = {"icc_variant": ICC_VARIANT}
    for kind in PARAMETER_CLASSES:
        pa, pb = a[kind], b[kind]
        if len(pa["thickness_um"]) != len(pb["thickness_um"]):
            raise ValueError(f"{kind}: profiles have different sample counts")
        # angles flagged missing in either profile are left out
        miss_a, miss_b = pa["missing"], pb["missing"]
        keep = [i for i in range(len(miss_a)) if not (miss_a[i] or miss_b[i])]
        xa = [pa["thickness_um"][i] for i in keep]
        xb = [pb["thickness_um"][i] for i in keep]
        entry = {"n": len(keep), "global_a_um": pa["global_um"], "global_b_um": pb["global_um"]}
        try:
            entry["icc"] = icc(xa, xb)
        except ValueError as exc:
            entry["icc"], entry["icc_note"] = None, str(exc)
        try:
            t = paired_ttest(xa, xb)
            entry["ttest"] = {"statistic": _finite(t.statistic), "pvalue": t.pvalue,
                              "degenerate": t.degenerate}
        except ValueError as exc:
            entry["ttest"] = None
            entry["ttest_note"] = str(exc)
        out[kind] = entry
    _write_json(args.out, out)


def cmd_gen_phantom(args):
    from dataclasses import replace

    from .pipeline.dataset import save_pair
    from .pipeline.phantom import PhantomSpec, gen_phantom, subject_specs
    from .volcore import VoxelSpacing

    base = PhantomSpec(dims=args.dims, noise=args.noise, profile=args.profile, seed=args.seed,
                       spacing=VoxelSpacing(*args.spacing))
    if args.count == 1:
        specs = [base]
    else:
        specs = subject_specs(args.count, base, args.seed)
    for i, spec in enumerate(specs):
        name = args.name if args.count == 1 else f"{args.name}-{i:03d}"
        v, l = gen_phantom(replace(spec))
        save_pair(args.out, name, v, l)


def cmd_run(args):
    from .pipeline.experiment import run_experiment

    report = run_experiment(args.config, out_dir=args.out_dir)
    log.info("config hash %s", report["config_hash"])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octpipe", description="OCT enhancement, segmentation and evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("enhance", help="digital enhancement of every B-scan")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--exponent", type=float, default=2.0)
    s.add_argument("--clip", type=float, default=2.0)
    s.add_argument("--tiles", type=lambda t: _dims(t, 2), default=(8, 8), help="ROWSxCOLS")
    s.add_argument("--averaging", default="exclude_center", choices=["exclude_center", "include_center"])
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("metrics", help="per-B-scan and mean UIQI/SSIM")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("train-enhancer", help="train the enhancement network")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width-scale", type=float, default=1.0)
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--steps", type=int, default=None, help="overrides --epochs")
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--extractor-width", type=float, default=0.125)
    s.set_defaults(func=cmd_train_enhancer)

    s = sub.add_parser("enhance-net", help="apply a trained enhancer")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_enhance_net)

    def seg_train_args(s, epochs):
        s.add_argument("--data", required=True)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--epochs", type=int, default=epochs)
        s.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
        s.add_argument("--lr", type=float, default=0.01)
        s.add_argument("--momentum", type=float, default=0.05)

    s = sub.add_parser("train-seg", help="train segmentation CNNs")
    seg_train_args(s, 50)
    s.add_argument("--out", required=True)
    s.add_argument("--fe-type", choices=["1", "2", "3", "all"], default="all")
    s.add_argument("--scale", type=float, default=1.0)
    s.set_defaults(func=cmd_train_seg)

    s = sub.add_parser("train-ensemble", help="train the ensembler over frozen CNNs")
    seg_train_args(s, 20)
    s.add_argument("--cnns", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dropout", type=float, default=0.5)
    s.set_defaults(func=cmd_train_ensemble)

    s = sub.add_parser("segment", help="segment a volume with a trained ONH-Net")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--probs", default=None, help="optional .npy for the (D, H, W, 8) probabilities")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("evaluate", help="Dice/sensitivity/specificity per tissue")
    s.add_argument("--pred", required=True, help="label file, or a directory for CSV batch mode")
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("extract-params", help="p-RNFLT and p-GCCT on a circular scan")
    s.add_argument("--labels", required=True)
    s.add_argument("--center", type=_center, default=None, help="W,D in voxels")
    s.add_argument("--diameter-mm", type=float, default=3.4)
    s.add_argument("--samples", type=int, default=360)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_params)

    s = sub.add_parser("agreement", help="ICC and paired t-test between two parameter files")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_agreement)

    s = sub.add_parser("gen-phantom", help="write synthetic volume/label pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--name", default="phantom")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=lambda t: _dims(t, 3), default=(32, 32, 16), help="HxWxD")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--profile", choices=["A", "B", "C"], default="A")
    s.add_argument("--spacing", type=float, nargs=3, default=(3.87, 11.7, 30.0),
                   metavar=("AXIAL", "LATERAL", "BSCAN"))
    s.set_defaults(func=cmd_gen_phantom)

    s = sub.add_parser("run", help="run a cross-validated experiment from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", default=None, help="resolve output paths here instead of next to the config")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    apply_thread_cap()
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"octpipe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
