"""Desk-scale residual CNN producing a three-level feature pyramid.

Geometry mirrors the ResNet50 tap points (layer2/3/4): for an input of
side ``L`` the pyramid levels have sides ``L/8``, ``L/16`` and ``L/32``
(28, 14, 7 at 224 pixels). Channel counts are configurable and default to
(32, 64, 128).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .rng import derive_seed


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, int, int] = (32, 64, 128)
    stem_channels: int = 16
    blocks_per_stage: tuple[int, int, int] = (1, 1, 1)
    input_size: int = 224
    norm: str = "group"

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        c1, c2, c3 = self.stage_channels
        if not c3 >= c2 >= c1 >= 1:
            raise ValueError("stage_channels must satisfy C3 >= C2 >= C1 >= 1")
        if self.stem_channels < 1 or min(self.blocks_per_stage) < 1:
            raise ValueError("stem_channels and blocks_per_stage must be positive")
        if self.norm not in ("group", "none"):
            raise ValueError("norm must be 'group' or 'none'")
        if self.input_size % 32 or self.input_size < 32:
            raise ValueError("input_size must be a positive multiple of 32")

    @property
    def coarsest(self) -> int:
        return self.input_size // 32


class FeaturePyramid(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor


def _norm(kind: str, channels: int) -> nn.Module:
    # per-sample statistics only: batch composition never changes a sample's output
    if kind == "group":
        # at most 8 groups, each holding >= 2 channels so a 1x1 map still has spread
        groups = max([g for g in range(1, 9) if channels % g == 0 and channels // g >= 2] or [1])
        return nn.GroupNorm(groups, channels)
    return nn.Identity()


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1, norm: str = "group"):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.norm1 = _norm(norm, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.norm2 = _norm(norm, cout)
        self.shortcut = nn.Conv2d(cin, cout, 1, stride) if stride != 1 or cin != cout else None

    def forward(self, x):
        y = self.norm2(self.conv2(F.relu(self.norm1(self.conv1(x)))))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(y + skip)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config = config or BackboneConfig()
        # patchify stem: stride 4 straight to the L/4 grid
        self.stem = nn.Conv2d(1, config.stem_channels, 4, 4)
        stages = []
        cin = config.stem_channels
        for cout, n in zip(config.stage_channels, config.blocks_per_stage):
            blocks = [ResidualBlock(cin, cout, 2, config.norm)]
            blocks += [ResidualBlock(cout, cout, 1, config.norm) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        size = self.config.input_size
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[-2:] != (size, size):
            raise ValueError(f"expected input of shape (B, 1, {size}, {size}), got {tuple(x.shape)}")
        h = F.relu(self.stem(x))
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return FeaturePyramid(*feats)


def init_std(layer: nn.Module) -> float:
    """Fan-in target std: He (gain sqrt 2) for rectified convs, LeCun for linear heads."""
    gain = 1.0 if isinstance(layer, nn.Linear) else 2.0
    return math.sqrt(gain / layer.weight[0].numel())


def init_weight_(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator, dtype=torch.float64)
                               * init_std(m))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.GroupNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def parameter_init(module: nn.Module, seed: int) -> nn.Module:
    """Deterministically (re)initialize every conv/linear layer of ``module``."""
    g = torch.Generator().manual_seed(derive_seed(seed, "init"))
    init_weight_(module, g)
    return module


def backward(loss: torch.Tensor) -> None:
    """Backpropagate a scalar loss recorded by a forward pass."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None and not loss.requires_grad:
        raise RuntimeError("backward called without a recorded forward pass")
    loss.backward()
