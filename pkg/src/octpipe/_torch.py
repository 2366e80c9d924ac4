"""Small torch helpers shared by the two networks."""

from __future__ import annotations

import math
import os
import zlib
from contextlib import contextmanager

import numpy as np
import torch


def derive_seed(seed: int, name: str) -> int:
    """Named sub-seed: stable across runs and platforms."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def scaled(base: int, scale: float) -> int:
    return max(1, int(round(base * scale)))


def count_params(module: torch.nn.Module, trainable: bool | None = None) -> int:
    return sum(
        p.numel() for p in module.parameters()
        if trainable is None or p.requires_grad == trainable
    )


def apply_thread_cap() -> None:
    n = os.environ.get("OCTPIPE_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


@contextmanager
def seeded(seed: int):
    """Run a block under a fixed global torch RNG without leaking state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def safe_rmse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """sqrt(mean((a-b)^2)), exactly 0 for identical inputs with finite gradient."""
    mse = torch.mean((a - b) ** 2)
    tiny = torch.finfo(mse.dtype).tiny
    return torch.where(mse > 0, mse.clamp_min(tiny).sqrt(), mse)


def init_weights(module: torch.nn.Module, seed: int) -> None:
    """Deterministic He-normal init for conv layers, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (torch.nn.Conv2d, torch.nn.Conv3d,
                          torch.nn.ConvTranspose2d, torch.nn.ConvTranspose3d)):
            w = m.weight
            if isinstance(m, (torch.nn.ConvTranspose2d, torch.nn.ConvTranspose3d)):
                fan_in = w.shape[0] * math.prod(w.shape[2:])
            else:
                fan_in = w.shape[1] * math.prod(w.shape[2:])
            with torch.no_grad():
                w.copy_(torch.randn(w.shape, generator=gen, dtype=w.dtype) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()


def zero_parameters(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss."""
