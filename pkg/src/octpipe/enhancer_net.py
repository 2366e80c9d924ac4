"""Learned B-scan enhancer trained to reproduce the digital enhancement chain.

The network is a U-Net with dilated feature-extraction blocks, a residual
bottleneck and multi-scale outputs that are summed before a sigmoid head.
Training minimises ``rmse + 0.01 * perceptual`` where the perceptual term
is the mean per-tap RMSE over five layers of a 16-convolution VGG-style
feature pyramid.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from torch import nn

from . import checkpoint as ckpt
from ._torch import (NonFiniteLossError, count_params, derive_seed, init_weights,
                     safe_rmse, scaled, seeded)
from .enhance import EnhanceConfig, enhance_volume
from .validation import check_divisible, check_images, check_same_shape

log = logging.getLogger(__name__)

RMSE_WEIGHT = 1.0
PERCEPTUAL_WEIGHT = 0.01
TAP_LAYERS = (2, 4, 6, 10, 14)
VGG19_BLOCKS = ((2, 64), (2, 128), (4, 256), (4, 512), (4, 512))


@dataclass(frozen=True)
class EnhancerSpec:
    base_filters: int = 10
    depth: int = 3
    dilation_rates: tuple[int, ...] = (1, 2, 4)
    n_residual: int = 4
    width_scale: float = 1.0

    def filters(self, level: int) -> int:
        return scaled(self.base_filters * 2 ** level, self.width_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnhancerSpec":
        d = dict(d)
        d["dilation_rates"] = tuple(d.get("dilation_rates", (1, 2, 4)))
        return cls(**d)


@dataclass(frozen=True)
class EnhancerLossWeights:
    rmse_weight: float = RMSE_WEIGHT
    perceptual_weight: float = PERCEPTUAL_WEIGHT

    def __post_init__(self):
        if self.rmse_weight < 0 or self.perceptual_weight < 0:
            raise ValueError("loss weights must be >= 0")


class DilatedBlock(nn.Module):
    """3x3 conv followed by parallel dilated 3x3 convs, summed, with a 1x1 skip."""

    def __init__(self, cin: int, cout: int, dilations: Sequence[int]):
        super().__init__()
        self.entry = nn.Conv2d(cin, cout, 3, padding=1)
        self.branches = nn.ModuleList(
            nn.Conv2d(cout, cout, 3, padding=r, dilation=r) for r in dilations
        )
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        h = F.elu(self.entry(x))
        h = sum(b(h) for b in self.branches)
        return F.elu(h + self.skip(x))


class ResidualBlock2d(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return F.elu(x + self.conv2(F.elu(self.conv1(x))))


class EnhancerNet(nn.Module):
    def __init__(self, spec: EnhancerSpec = EnhancerSpec()):
        super().__init__()
        self.spec = spec
        dil = spec.dilation_rates
        self.encoders = nn.ModuleList()
        cin = 1
        for level in range(spec.depth):
            self.encoders.append(DilatedBlock(cin, spec.filters(level), dil))
            cin = spec.filters(level)
        cb = spec.filters(spec.depth)
        self.bottleneck = DilatedBlock(cin, cb, dil)
        self.residual = nn.Sequential(*[ResidualBlock2d(cb) for _ in range(spec.n_residual)])

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        self.side = nn.ModuleList()
        cprev = cb
        for level in reversed(range(spec.depth)):
            c = spec.filters(level)
            self.ups.append(nn.ConvTranspose2d(cprev, c, 2, stride=2))
            self.decoders.append(DilatedBlock(2 * c, c, dil))
            if level > 0:
                self.side.append(nn.Conv2d(c, 1, 1))
            cprev = c
        self.head = nn.Conv2d(cprev, 1, 1)

    @property
    def divisor(self) -> int:
        return 2 ** self.spec.depth

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        check_divisible(x.shape[-2:], self.divisor, "enhancer input")
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.residual(self.bottleneck(h))
        out = 0.0
        size = x.shape[-2:]
        for i, (up, dec) in enumerate(zip(self.ups, self.decoders)):
            h = up(h)
            h = dec(torch.cat([h, skips.pop()], dim=1))
            if i < len(self.side):
                out = out + F.interpolate(self.side[i](h), size=size, mode="bilinear",
                                          align_corners=False)
        return self.head(h) + out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # keep the output strictly inside (0, 1) even where float rounding saturates the sigmoid
        eps = torch.finfo(x.dtype).eps
        return torch.sigmoid(self.logits(x)).clamp(eps, 1.0 - eps)


def build_enhancer(spec: EnhancerSpec = EnhancerSpec(), seed: int = 0) -> EnhancerNet:
    net = EnhancerNet(spec)
    init_weights(net, seed)
    # output projections start small so the untrained net sits near 0.5, not at the rails
    with torch.no_grad():
        for conv in [net.head, *net.side]:
            conv.weight.mul_(0.01)
    return net


# ---------------------------------------------------------------------------
# Perceptual feature pyramid


@dataclass(frozen=True)
class ExtractorSpec:
    """VGG19 layout (16 convs) with channel widths multiplied by ``width``."""

    width: float = 0.125
    taps: tuple[int, ...] = TAP_LAYERS
    seed: int = 0

    def to_dict(self) -> dict:
        return {"width": self.width, "taps": list(self.taps), "seed": self.seed}


class PerceptualExtractor(nn.Module):
    """Frozen 16-convolution pyramid returning post-ReLU maps at the tap layers.

    Weights are He-normal from ``spec.seed`` unless loaded from a checkpoint
    directory (e.g. converted pretrained VGG19 weights at ``width=1``).
    Grayscale input is replicated to three channels.
    """

    def __init__(self, spec: ExtractorSpec = ExtractorSpec(), weights_path=None):
        super().__init__()
        self.spec = spec
        convs = []
        pool_after = []
        cin = 3
        for n_convs, base in VGG19_BLOCKS:
            c = scaled(base, spec.width)
            for j in range(n_convs):
                convs.append(nn.Conv2d(cin, c, 3, padding=1))
                cin = c
            pool_after.append(len(convs))
        self.convs = nn.ModuleList(convs)
        self._pool_after = set(pool_after[:-1])
        if len(self.convs) != 16:
            raise AssertionError("extractor must have 16 convolutions")
        if weights_path is not None:
            ckpt.load_into(self, weights_path)
        else:
            init_weights(self, spec.seed)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        taps = set(self.spec.taps)
        last = max(taps)
        feats = []
        h = x
        for i, conv in enumerate(self.convs, start=1):
            h = F.relu(conv(h))
            if i in taps:
                feats.append(h)
            if i == last:
                break
            if i in self._pool_after:
                h = F.max_pool2d(h, 2)
        return feats


def _as_tensor(img, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        t = img
    else:
        t = torch.tensor(np.asarray(img, dtype=np.float64))
    if like is not None:
        t = t.to(like.dtype)
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t


def rmse_loss(pred, target) -> torch.Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    check_same_shape(pred, target, "rmse_loss")
    return safe_rmse(pred, target.to(pred.dtype))


def perceptual_loss(pred, target, extractor: PerceptualExtractor) -> torch.Tensor:
    """Mean over the tap layers of the RMSE between feature maps."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    check_same_shape(pred, target, "perceptual_loss")
    dtype = next(extractor.parameters()).dtype
    pred, target = pred.to(dtype), target.to(dtype)
    fp = extractor(pred)
    with torch.no_grad():
        ft = extractor(target)
    return torch.stack([safe_rmse(a, b) for a, b in zip(fp, ft)]).mean()


def combined_loss(pred, target, extractor: PerceptualExtractor,
                  weights: EnhancerLossWeights = EnhancerLossWeights()) -> torch.Tensor:
    loss = weights.rmse_weight * rmse_loss(pred, target)
    if weights.perceptual_weight:
        loss = loss + weights.perceptual_weight * perceptual_loss(pred, target, extractor)
    return loss


# ---------------------------------------------------------------------------
# Training


@dataclass
class EnhancerTrainConfig:
    steps: int = 500
    lr: float = 1e-4
    seed: int = 0
    loss_weights: EnhancerLossWeights = field(default_factory=EnhancerLossWeights)
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    augment: object = None  # pipeline.augment.AugmentSpec; geometric parts only
    log_every: int = 0


@dataclass
class EnhancerTrainResult:
    network: EnhancerNet
    step_losses: list[float]
    epoch_losses: list[float]
    seed: int


def train_enhancer(inputs: np.ndarray, targets: np.ndarray, spec: EnhancerSpec = EnhancerSpec(),
                   cfg: EnhancerTrainConfig | None = None) -> EnhancerTrainResult:
    """Adam training on (baseline, digitally enhanced) B-scan pairs, batch size 1.

    One epoch is one pass over the pairs in a seed-fixed shuffled order;
    training stops after ``cfg.steps`` optimizer steps.
    """
    from .pipeline.augment import sample_transform, apply_geometric

    cfg = cfg or EnhancerTrainConfig()
    inputs = check_images(inputs, ndims=(3,), name="inputs")
    targets = check_images(targets, ndims=(3,), name="targets")
    check_same_shape(inputs, targets, "enhancer pair")
    if len(inputs) == 0:
        raise ValueError("empty training set")

    net = build_enhancer(spec, derive_seed(cfg.seed, "init"))
    check_divisible(inputs.shape[1:], net.divisor, "enhancer input")
    extractor = PerceptualExtractor(cfg.extractor)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "order"))
    aug_seed = derive_seed(cfg.seed, "augment")

    step_losses: list[float] = []
    epoch_losses: list[float] = []
    step = 0
    epoch = 0
    net.train()
    while step < cfg.steps:
        epoch_sum, epoch_n = 0.0, 0
        for i in order_rng.permutation(len(inputs)):
            x, y = inputs[i], targets[i]
            if cfg.augment is not None:
                t = sample_transform(cfg.augment, aug_seed + step)
                x = apply_geometric(x[None], t, order=1)[0]
                y = apply_geometric(y[None], t, order=1)[0]
            xt = torch.tensor(x, dtype=torch.float32)[None, None]
            yt = torch.tensor(y, dtype=torch.float32)[None, None]
            loss = combined_loss(net(xt), yt, extractor, cfg.loss_weights)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite enhancer loss {value} at step {step} (epoch {epoch}, pair {i})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            step_losses.append(value)
            epoch_sum += value
            epoch_n += 1
            step += 1
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("enhancer step %d loss %.6f", step, value)
            if step >= cfg.steps:
                break
        epoch_losses.append(epoch_sum / epoch_n)
        log.info("enhancer epoch %d mean loss %.6f", epoch, epoch_losses[-1])
        epoch += 1
    net.eval()
    return EnhancerTrainResult(net, step_losses, epoch_losses, cfg.seed)


def enhance_with_net(net: EnhancerNet, img: np.ndarray) -> np.ndarray:
    """Enhance one B-scan ``(H, W)`` or a stack ``(n, H, W)``."""
    arr = check_images(img, ndims=(2, 3))
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    check_divisible(arr.shape[1:], net.divisor, "enhancer input")
    net.eval()
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        out = net(torch.tensor(arr, dtype=dtype)[:, None]).double().numpy()[:, 0]
    return out[0] if single else out


def save_enhancer(net: EnhancerNet, path, seed: int | None = None, extra: dict | None = None):
    return ckpt.save_checkpoint(path, net, "enhancer", net.spec.to_dict(), seed, extra)


def load_enhancer(path) -> EnhancerNet:
    meta = ckpt.read_spec(path)
    if meta["kind"] != "enhancer":
        raise ckpt.CheckpointError(f"{path}: expected an enhancer checkpoint, got {meta['kind']}")
    net = EnhancerNet(EnhancerSpec.from_dict(meta["spec"]))
    ckpt.load_into(net, path)
    net.eval()
    return net


class NetEnhancer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(X, y)`` trains the enhancer, ``transform`` applies it.

    When ``y`` is omitted the targets are the digital enhancement of ``X``.
    """

    def __init__(self, width_scale=1.0, base_filters=10, depth=3, n_residual=4,
                 steps=500, lr=1e-4, perceptual_weight=PERCEPTUAL_WEIGHT,
                 extractor_width=0.125, random_state=0):
        self.width_scale = width_scale
        self.base_filters = base_filters
        self.depth = depth
        self.n_residual = n_residual
        self.steps = steps
        self.lr = lr
        self.perceptual_weight = perceptual_weight
        self.extractor_width = extractor_width
        self.random_state = random_state

    def _spec(self) -> EnhancerSpec:
        return EnhancerSpec(base_filters=self.base_filters, depth=self.depth,
                            n_residual=self.n_residual, width_scale=self.width_scale)

    def fit(self, X, y=None):
        X = check_images(X, ndims=(3,))
        y = enhance_volume(X, EnhanceConfig()) if y is None else check_images(y, ndims=(3,))
        cfg = EnhancerTrainConfig(
            steps=self.steps, lr=self.lr, seed=self.random_state,
            loss_weights=EnhancerLossWeights(RMSE_WEIGHT, self.perceptual_weight),
            extractor=ExtractorSpec(width=self.extractor_width),
        )
        res = train_enhancer(X, y, self._spec(), cfg)
        self.network_ = res.network
        self.loss_curve_ = res.step_losses
        self.epoch_losses_ = res.epoch_losses
        self.n_params_ = count_params(res.network)
        return self

    def transform(self, X):
        if not hasattr(self, "network_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("NetEnhancer is not fitted yet")
        return enhance_with_net(self.network_, X)

    predict = transform

    def save(self, path) -> Path:
        return save_enhancer(self.network_, path, self.random_state)
