"""ONH-Net: three 3D segmentation CNNs fused by a trainable ensembler.

Tensors are laid out ``(N, C, D, H, W)`` with D the B-scan axis, matching
the ``(depth, height, width)`` arrays of :mod:`octpipe.volcore`.  Kernel
shapes given in (height x width x depth) order are therefore permuted:
a 3x3x1 (H x W) kernel is ``(1, 3, 3)`` here.

Each segmentation CNN is a macro U-shape: two micro-U-Nets in the encoder
separated by max-pooling, a residual latent space, two micro-U-Nets in the
decoder reached through transposed convolutions, encoder-decoder skips, and
multi-scale side outputs added to the decoder output before the 1x1x1
classifier.  The three CNNs differ only in their feature-extraction unit.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from torch import nn

from . import checkpoint as ckpt
from ._torch import NonFiniteLossError, count_params, derive_seed, init_weights, scaled, seeded
from .validation import check_divisible, check_label_volumes, check_volumes
from .volcore import NUM_CLASSES

log = logging.getLogger(__name__)

JACCARD_EPS = 1e-7


class FeUnitType(enum.IntEnum):
    TYPE1 = 1
    TYPE2 = 2
    TYPE3 = 3


def _conv(cin, cout, k):
    k = (k, k, k) if isinstance(k, int) else k
    return nn.Conv3d(cin, cout, k, padding=tuple(s // 2 for s in k))


# ---------------------------------------------------------------------------
# Feature-extraction units


class PathwayFE(nn.Module):
    """FE Types 1 and 2: identity, planar and volumetric pathways, summed.

    Type 2 differs only by an ELU pre-activation of the input.
    """

    def __init__(self, cin: int, c: int, pre_activate: bool):
        super().__init__()
        self.pre_activate = pre_activate
        self.out_channels = c
        self.identity = _conv(cin, c, 1)
        # 3x3x1 (H x W), 3x1x3 (H x D), 1x3x3 (W x D)
        self.planar = nn.ModuleList([
            _conv(cin, c, (1, 3, 3)), _conv(c, c, (3, 3, 1)), _conv(c, c, (3, 1, 3)),
        ])
        self.volumetric = nn.ModuleList([_conv(cin, c, 3), _conv(c, c, 3), _conv(c, c, 3)])
        self.bn = nn.BatchNorm3d(c)

    @staticmethod
    def _chain(layers, x):
        for i, conv in enumerate(layers):
            x = conv(x)
            if i < len(layers) - 1:
                x = F.elu(x)
        return x

    def forward(self, x):
        if self.pre_activate:
            x = F.elu(x)
        s = self.identity(x) + self._chain(self.planar, x) + self._chain(self.volumetric, x)
        return F.elu(self.bn(s))


class ResidualFE(nn.Module):
    """FE Type 3: ELU input, three residual blocks (48/96/144 filters), BN + ELU."""

    def __init__(self, cin: int, widths: tuple[int, int, int]):
        super().__init__()
        self.convs = nn.ModuleList()
        self.skips = nn.ModuleList()
        c = cin
        for w in widths:
            self.convs.append(_conv(c, w, 3))
            self.skips.append(_conv(c, w, 1))
            c = w
        self.out_channels = c
        self.bn = nn.BatchNorm3d(c)

    def forward(self, x):
        x = F.elu(x)
        for conv, skip in zip(self.convs, self.skips):
            x = F.elu(conv(x) + skip(x))
        return F.elu(self.bn(x))


def build_fe_unit(t: FeUnitType | int, in_ch: int, scale: float = 1.0, filters: int = 48) -> nn.Module:
    t = FeUnitType(int(t))
    if t is FeUnitType.TYPE3:
        return ResidualFE(in_ch, (scaled(filters, scale), scaled(2 * filters, scale),
                                  scaled(3 * filters, scale)))
    return PathwayFE(in_ch, scaled(filters, scale), pre_activate=t is FeUnitType.TYPE2)


def fe_param_count(t: FeUnitType | int, cin: int, scale: float = 1.0, filters: int = 48) -> int:
    """Closed-form trainable parameter count of one FE unit.

    Each conv contributes ``prod(kernel) * cin * cout + cout``; batch norm
    contributes ``2 * c``.
    """
    t = FeUnitType(int(t))

    def conv(k, ci, co):
        return k * ci * co + co

    if t is FeUnitType.TYPE3:
        widths = (scaled(filters, scale), scaled(2 * filters, scale), scaled(3 * filters, scale))
        total, c = 0, cin
        for w in widths:
            total += conv(27, c, w) + conv(1, c, w)
            c = w
        return total + 2 * c
    c = scaled(filters, scale)
    identity = conv(1, cin, c)
    planar = conv(9, cin, c) + 2 * conv(9, c, c)
    volumetric = conv(27, cin, c) + 2 * conv(27, c, c)
    return identity + planar + volumetric + 2 * c


# ---------------------------------------------------------------------------
# Segmentation CNN


class MicroUNet(nn.Module):
    """Two-level U of FE units: FE, pool, FE, up-conv, concat skip, FE."""

    def __init__(self, fe_type: FeUnitType, cin: int, scale: float, filters: int = 48):
        super().__init__()
        self.enc = build_fe_unit(fe_type, cin, scale, filters)
        c = self.enc.out_channels
        self.mid = build_fe_unit(fe_type, c, scale, filters)
        cu = scaled(filters, scale)
        self.up = nn.ConvTranspose3d(c, cu, 3, stride=2, padding=1, output_padding=1)
        self.dec = build_fe_unit(fe_type, c + cu, scale, filters)
        self.out_channels = self.dec.out_channels

    def forward(self, x):
        s = self.enc(x)
        h = self.mid(F.max_pool3d(s, 2))
        return self.dec(torch.cat([self.up(h), s], dim=1))


class LatentSpace(nn.Module):
    def __init__(self, cin: int, c: int, n_blocks: int):
        super().__init__()
        self.proj = _conv(cin, c, 1)
        self.blocks = nn.ModuleList(
            nn.ModuleList([_conv(c, c, 3), _conv(c, c, 3), nn.BatchNorm3d(c)])
            for _ in range(n_blocks)
        )
        self.out_channels = c

    def forward(self, x):
        x = F.elu(self.proj(x))
        for a, b, bn in self.blocks:
            x = F.elu(bn(x + b(F.elu(a(x)))))
        return x


@dataclass(frozen=True)
class SegCnnSpec:
    fe_type: int = 1
    filters: int = 48
    width_scale: float = 1.0
    num_classes: int = NUM_CLASSES
    latent_filters: int = 96
    latent_blocks: int = 4

    def __post_init__(self):
        FeUnitType(int(self.fe_type))
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes is fixed at {NUM_CLASSES}")

    def to_dict(self) -> dict:
        return asdict(self)


class SegCNN(nn.Module):
    divisor = 4

    def __init__(self, spec: SegCnnSpec = SegCnnSpec()):
        super().__init__()
        self.spec = spec
        t, s, f = FeUnitType(spec.fe_type), spec.width_scale, spec.filters
        cu = scaled(f, s)
        self.enc1 = MicroUNet(t, 1, s, f)
        c = self.enc1.out_channels
        self.enc2 = MicroUNet(t, c, s, f)
        self.latent = LatentSpace(c, scaled(spec.latent_filters, s), spec.latent_blocks)
        cl = self.latent.out_channels
        self.up1 = nn.ConvTranspose3d(cl, cu, 3, stride=2, padding=1, output_padding=1)
        self.dec1 = MicroUNet(t, cu + c, s, f)
        self.up2 = nn.ConvTranspose3d(c, cu, 3, stride=2, padding=1, output_padding=1)
        self.dec2 = MicroUNet(t, cu + c, s, f)
        # multi-scale side outputs projected to the decoder width
        self.side_latent = _conv(cl, c, 1)
        self.side_dec1 = _conv(c, c, 1)
        self.classifier = _conv(c, spec.num_classes, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-softmax class maps from the last 3D convolution."""
        check_divisible(x.shape[-3:], self.divisor, "segmentation input")
        size = x.shape[-3:]
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool3d(e1, 2))
        z = self.latent(F.max_pool3d(e2, 2))
        d1 = self.dec1(torch.cat([self.up1(z), e2], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d1), e1], dim=1))
        ms = (F.interpolate(self.side_latent(z), size=size, mode="trilinear", align_corners=False)
              + F.interpolate(self.side_dec1(d1), size=size, mode="trilinear", align_corners=False))
        return self.classifier(d2 + ms)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


def _shrink(conv: nn.Module, factor: float = 0.01) -> None:
    # start from near-uniform class probabilities; He-scaled logits saturate the softmax
    with torch.no_grad():
        conv.weight.mul_(factor)


def build_seg_cnn(spec: SegCnnSpec = SegCnnSpec(), seed: int = 0) -> SegCNN:
    net = SegCNN(spec)
    init_weights(net, seed)
    _shrink(net.classifier)
    # side outputs start silent so coarse, unnormalized latent activations
    # cannot swamp the full-resolution decoder early in training
    _shrink(net.side_latent, 0.0)
    _shrink(net.side_dec1, 0.0)
    return net


# ---------------------------------------------------------------------------
# Ensembler and ONH-Net


@dataclass(frozen=True)
class EnsemblerSpec:
    conv_filters: tuple[int, ...] = (48, 96, 192)
    convs_per_set: int = 2
    dense_units: int = 64
    dropout: float = 0.5
    width_scale: float = 1.0
    n_inputs: int = 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnsemblerSpec":
        d = dict(d)
        d["conv_filters"] = tuple(d["conv_filters"])
        return cls(**d)


class Ensembler(nn.Module):
    """Conv sets (3x3x3) with dropout between them, then per-voxel dense 64 -> 8."""

    def __init__(self, spec: EnsemblerSpec = EnsemblerSpec()):
        super().__init__()
        self.spec = spec
        cin = spec.n_inputs * NUM_CLASSES
        self.sets = nn.ModuleList()
        for f in spec.conv_filters:
            c = scaled(f, spec.width_scale)
            layers = []
            for _ in range(spec.convs_per_set):
                layers.append(_conv(cin, c, 3))
                cin = c
            self.sets.append(nn.ModuleList(layers))
        self.dense1 = _conv(cin, scaled(spec.dense_units, spec.width_scale), 1)
        self.dense2 = _conv(self.dense1.out_channels, NUM_CLASSES, 1)
        self.drop = nn.Dropout(spec.dropout)

    def logits(self, x):
        for i, layers in enumerate(self.sets):
            if i > 0:
                x = self.drop(x)
            for conv in layers:
                x = F.elu(conv(x))
        x = self.drop(F.elu(self.dense1(x)))
        return self.dense2(x)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


class ONHNet(nn.Module):
    """Frozen segmentation CNNs as parallel inputs to a trainable ensembler."""

    def __init__(self, cnns, ensembler: Ensembler):
        super().__init__()
        if len(cnns) != ensembler.spec.n_inputs:
            raise ValueError(f"expected {ensembler.spec.n_inputs} CNNs, got {len(cnns)}")
        self.cnns = nn.ModuleList(cnns)
        self.ensembler = ensembler
        for p in self.cnns.parameters():
            p.requires_grad_(False)
        self.cnns.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        self.cnns.eval()  # frozen: batch-norm statistics must not move
        return self

    def cnn_logits(self, x):
        with torch.no_grad():
            return torch.cat([cnn.logits(x) for cnn in self.cnns], dim=1)

    def logits(self, x):
        return self.ensembler.logits(self.cnn_logits(x))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


def _centre_tap_init(ens: Ensembler, seed: int) -> None:
    # The ensembler starts as a per-voxel map of the CNN class scores and
    # learns spatial context from there; random 3x3x3 kernels blur layers that
    # are only a few voxels thick and take far longer to sharpen.
    gen = torch.Generator().manual_seed(int(seed))
    for layers in ens.sets:
        for conv in layers:
            w = torch.zeros_like(conv.weight)
            cout, cin = w.shape[:2]
            centre = tuple(k // 2 for k in w.shape[2:])
            w[(slice(None), slice(None)) + centre] = torch.randn((cout, cin), generator=gen) * (2.0 / cin) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(w)


def build_ensembler(spec: EnsemblerSpec = EnsemblerSpec(), seed: int = 0) -> Ensembler:
    ens = Ensembler(spec)
    init_weights(ens, seed)
    _centre_tap_init(ens, derive_seed(seed, "centre-tap"))
    _shrink(ens.dense2)
    return ens


def build_onh_net(cnns, ens_spec: EnsemblerSpec = EnsemblerSpec(), seed: int = 0) -> ONHNet:
    return ONHNet(list(cnns), build_ensembler(ens_spec, seed))


# ---------------------------------------------------------------------------
# Loss, inference


def one_hot(labels: torch.Tensor) -> torch.Tensor:
    """``(N, D, H, W)`` class ids -> ``(N, 8, D, H, W)`` float one-hot."""
    return F.one_hot(labels.long(), NUM_CLASSES).permute(0, 4, 1, 2, 3).to(torch.get_default_dtype())


def jaccard_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Soft Jaccard distance averaged over the classes present in ``labels``.

    ``probs`` is ``(N, 8, D, H, W)``; ``labels`` holds class ids
    ``(N, D, H, W)`` or a one-hot tensor shaped like ``probs``.
    """
    if labels.dim() == probs.dim():
        g = labels.to(probs.dtype)
    else:
        g = one_hot(labels).to(probs.dtype)
    if g.shape != probs.shape:
        raise ValueError(f"dimension mismatch: probs {tuple(probs.shape)} vs labels {tuple(g.shape)}")
    dims = (0, 2, 3, 4)
    inter = (probs * g).sum(dims)
    union = probs.sum(dims) + g.sum(dims) - inter
    present = g.sum(dims) > 0
    per_class = 1.0 - inter / (union + JACCARD_EPS)
    return per_class[present].mean()


def argmax_labels(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Per-voxel argmax; ``np.argmax`` returns the lowest id on ties."""
    return np.argmax(probs, axis=axis).astype(np.uint8)


def predict_proba(net: nn.Module, volumes: np.ndarray) -> np.ndarray:
    """Class probabilities ``(n, D, H, W, 8)`` for volumes ``(n, D, H, W)``."""
    vols = check_volumes(volumes)
    net.eval()
    dtype = next(net.parameters()).dtype
    out = []
    with torch.no_grad():
        for v in vols:
            p = net(torch.tensor(v, dtype=dtype)[None, None])[0]
            out.append(p.permute(1, 2, 3, 0).double().numpy())
    return np.stack(out)


def segment(net: nn.Module, volume) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities ``(D, H, W, 8)``, labels ``(D, H, W)``) for one volume."""
    probs = predict_proba(net, volume)[0]
    return probs, argmax_labels(probs)


# ---------------------------------------------------------------------------
# Training


@dataclass
class SegTrainConfig:
    epochs: int = 50
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.05
    nesterov: bool = True
    seed: int = 0
    augment: object = None  # pipeline.augment.AugmentSpec


@dataclass
class TrainLog:
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def _optimizer(params, cfg: SegTrainConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                               nesterov=cfg.nesterov and cfg.momentum > 0)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def _fit(net: nn.Module, params, volumes, labels, cfg: SegTrainConfig, tag: str,
         features=None) -> TrainLog:
    """Shared batch-size-1 loop.  ``features`` (one ``(1, C, D, H, W)`` tensor
    per volume) replaces the raw volumes as network input when given."""
    from .pipeline.augment import augment_arrays

    vols = check_volumes(volumes)
    labs = check_label_volumes(labels)
    if len(vols) == 0:
        raise ValueError("empty training set")
    if vols.shape != labs.shape:
        raise ValueError(f"volume/label shape mismatch: {vols.shape} vs {labs.shape}")
    check_divisible(vols.shape[-3:], 4, "training volume")
    opt = _optimizer(params, cfg)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, f"{tag}-order"))
    aug_seed = derive_seed(cfg.seed, f"{tag}-augment")
    dtype = next(net.parameters()).dtype
    out = TrainLog()
    step = 0
    with seeded(derive_seed(cfg.seed, f"{tag}-dropout")):
        net.train()
        for epoch in range(cfg.epochs):
            total = 0.0
            for i in order_rng.permutation(len(vols)):
                x, y = vols[i], labs[i]
                if features is not None:
                    xt = features[i]
                else:
                    if cfg.augment is not None:
                        x, y = augment_arrays(x, y, cfg.augment, aug_seed + step)
                    xt = torch.tensor(x, dtype=dtype)[None, None]
                yt = torch.tensor(np.ascontiguousarray(y), dtype=torch.long)[None]
                loss = jaccard_loss(net(xt), yt)
                value = float(loss.detach())
                if not np.isfinite(value):
                    raise NonFiniteLossError(
                        f"{tag}: non-finite Jaccard loss {value} at epoch {epoch}, step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                out.step_losses.append(value)
                total += value
                step += 1
            out.epoch_losses.append(total / len(vols))
            log.info("%s epoch %d loss %.5f", tag, epoch, out.epoch_losses[-1])
        net.eval()
    return out


def train_seg_cnn(net: SegCNN, volumes, labels, cfg: SegTrainConfig | None = None) -> TrainLog:
    """Stage 1: train one segmentation CNN end-to-end, batch size 1."""
    cfg = cfg or SegTrainConfig()
    return _fit(net, list(net.parameters()), volumes, labels, cfg, f"cnn{net.spec.fe_type}")


def train_ensembler(onh: ONHNet, volumes, labels, cfg: SegTrainConfig | None = None) -> TrainLog:
    """Stage 2: train the ensembler with the CNN weights frozen."""
    cfg = cfg or SegTrainConfig()
    if cfg.augment is not None:
        return _fit(onh, list(onh.ensembler.parameters()), volumes, labels, cfg, "ensembler")
    # frozen eval-mode CNNs give fixed outputs without augmentation: compute once
    dtype = next(onh.ensembler.parameters()).dtype
    feats = [onh.cnn_logits(torch.tensor(v, dtype=dtype)[None, None]) for v in check_volumes(volumes)]
    log_ = _fit(onh.ensembler, list(onh.ensembler.parameters()), volumes, labels, cfg,
                "ensembler", features=feats)
    onh.eval()
    return log_


@dataclass
class SegTrainingResult:
    cnns: list
    onh: ONHNet
    cnn_logs: list
    ensembler_log: TrainLog


def train_seg(volumes, labels, scale: float = 1.0, fe_types=(1, 2, 3),
              cnn_cfg: SegTrainConfig | None = None, ens_cfg: SegTrainConfig | None = None,
              seed: int = 0, ens_spec: EnsemblerSpec | None = None) -> SegTrainingResult:
    """Two-stage ONH-Net training on the same labelled data."""
    cnn_cfg = cnn_cfg or SegTrainConfig(seed=seed)
    ens_cfg = ens_cfg or SegTrainConfig(seed=seed)
    cnns, logs = [], []
    for t in fe_types:
        net = build_seg_cnn(SegCnnSpec(fe_type=int(t), width_scale=scale),
                            derive_seed(seed, f"init-cnn{int(t)}"))
        logs.append(train_seg_cnn(net, volumes, labels, cnn_cfg))
        cnns.append(net)
    ens_spec = ens_spec or EnsemblerSpec(width_scale=scale, n_inputs=len(cnns))
    onh = build_onh_net(cnns, ens_spec, derive_seed(seed, "init-ensembler"))
    ens_log = train_ensembler(onh, volumes, labels, ens_cfg)
    return SegTrainingResult(cnns, onh, logs, ens_log)


# ---------------------------------------------------------------------------
# Checkpoints


def save_seg_cnn(net: SegCNN, path, seed=None, extra=None) -> Path:
    return ckpt.save_checkpoint(path, net, "segcnn", net.spec.to_dict(), seed, extra)


def load_seg_cnn(path) -> SegCNN:
    meta = ckpt.read_spec(path)
    if meta["kind"] != "segcnn":
        raise ckpt.CheckpointError(f"{path}: expected a segcnn checkpoint, got {meta['kind']}")
    net = SegCNN(SegCnnSpec(**meta["spec"]))
    ckpt.load_into(net, path)
    return net.eval()


def save_onh_net(onh: ONHNet, path, seed=None, extra=None) -> Path:
    """ONH-Net directory: ensembler tensors at top level, CNNs in ``cnn{i}/``."""
    path = Path(path)
    names = []
    for i, cnn in enumerate(onh.cnns):
        sub = f"cnn{i}"
        save_seg_cnn(cnn, path / sub)
        names.append(sub)
    meta = {"cnns": names}
    if extra:
        meta.update(extra)
    return ckpt.save_checkpoint(path, onh.ensembler, "onhnet", onh.ensembler.spec.to_dict(), seed, meta)


def load_onh_net(path) -> ONHNet:
    path = Path(path)
    meta = ckpt.read_spec(path)
    if meta["kind"] != "onhnet":
        raise ckpt.CheckpointError(f"{path}: expected an onhnet checkpoint, got {meta['kind']}")
    cnns = [load_seg_cnn(path / sub) for sub in meta["cnns"]]
    ens = Ensembler(EnsemblerSpec.from_dict(meta["spec"]))
    ckpt.load_into(ens, path)
    return ONHNet(cnns, ens).eval()


# ---------------------------------------------------------------------------
# Estimator


class ONHNetSegmenter(ClassifierMixin, BaseEstimator):
    """Estimator over volume stacks ``(n, D, H, W)`` with label stacks of the same shape.

    ``fit`` trains the selected CNNs and then the ensembler; ``predict_proba``
    returns ``(n, D, H, W, 8)`` and ``predict`` the argmax labels.  ``score``
    is the mean Dice over the five scored tissues.
    """

    def __init__(self, width_scale=0.1, fe_types=(1, 2, 3), cnn_epochs=50, ensemble_epochs=20,
                 optimizer="sgd", lr=0.01, momentum=0.05, ensemble_lr=None, augment=None,
                 random_state=0):
        self.width_scale = width_scale
        self.fe_types = fe_types
        self.cnn_epochs = cnn_epochs
        self.ensemble_epochs = ensemble_epochs
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.ensemble_lr = ensemble_lr
        self.augment = augment
        self.random_state = random_state

    def fit(self, X, y):
        X = check_volumes(X)
        y = check_label_volumes(y)
        cnn_cfg = SegTrainConfig(epochs=self.cnn_epochs, optimizer=self.optimizer, lr=self.lr,
                                 momentum=self.momentum, seed=self.random_state, augment=self.augment)
        ens_cfg = SegTrainConfig(epochs=self.ensemble_epochs, optimizer=self.optimizer,
                                 lr=self.ensemble_lr or self.lr, momentum=self.momentum,
                                 seed=self.random_state, augment=self.augment)
        res = train_seg(X, y, self.width_scale, self.fe_types, cnn_cfg, ens_cfg, self.random_state)
        self.cnns_ = res.cnns
        self.onh_ = res.onh
        self.cnn_loss_curves_ = [l.epoch_losses for l in res.cnn_logs]
        self.ensemble_loss_curve_ = res.ensembler_log.epoch_losses
        self.classes_ = np.arange(NUM_CLASSES)
        return self

    def _check_fitted(self):
        if not hasattr(self, "onh_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("ONHNetSegmenter is not fitted yet")

    def predict_proba(self, X):
        self._check_fitted()
        return predict_proba(self.onh_, X)

    def predict(self, X):
        return argmax_labels(self.predict_proba(X))

    def score(self, X, y, sample_weight=None):
        from .segeval import score_all
        pred = self.predict(X)
        y = check_label_volumes(y)
        return float(np.mean([score_all(p, t).mean_dice for p, t in zip(pred, y)]))

    def save(self, path) -> Path:
        self._check_fitted()
        return save_onh_net(self.onh_, path, self.random_state)
