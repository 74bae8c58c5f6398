"""Multiscale attention generator, attention pooling and the MA-Net model."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import FLAT_STD
from .backbone import Backbone, BackboneConfig, FeaturePyramid, parameter_init

POOLINGS = ("attention", "gap", "gmp")


class AttentionGenerator(nn.Module):
    """1x1 conv per selected pyramid level, average-pooled down to the
    coarsest grid, summed across levels and rectified."""

    def __init__(self, channels: Sequence[int], num_maps: int = 32, scales: Sequence[int] = (2, 3)):
        super().__init__()
        scales = tuple(sorted(set(int(s) for s in scales)))
        if not scales:
            raise ValueError("scales_used must be nonempty")
        if not set(scales) <= {1, 2, 3}:
            raise ValueError(f"scales must be a subset of {{1, 2, 3}}, got {scales}")
        self.scales = scales
        self.num_maps = num_maps
        self.convs = nn.ModuleDict({str(s): nn.Conv2d(channels[s - 1], num_maps, 1) for s in scales})

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        size = pyramid.f3.shape[-1]
        total = None
        for s in self.scales:
            a = self.convs[str(s)](pyramid[s - 1])
            ratio = a.shape[-1] // size
            if ratio > 1:
                a = F.avg_pool2d(a, ratio)
            total = a if total is None else total + a
        return F.relu(total)


def attention_pool(f3: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Feature matrix M of shape (B, N, C): row j is the spatial mean of A_j * f3."""
    if f3.shape[-2:] != attention.shape[-2:] or f3.shape[0] != attention.shape[0]:
        raise ValueError(f"spatial mismatch: f3 {tuple(f3.shape)} vs attention {tuple(attention.shape)}")
    h, w = f3.shape[-2:]
    return torch.einsum("bnhw,bchw->bnc", attention, f3) / (h * w)


def standardize(x: torch.Tensor) -> torch.Tensor:
    """Per-image Z-score over (C, H, W); constant images become zeros."""
    flat = x.flatten(1)
    mean = flat.mean(dim=1)
    std = flat.std(dim=1, unbiased=False)
    shape = (-1,) + (1,) * (x.dim() - 1)
    centered = x - mean.view(shape)
    flat_image = std <= FLAT_STD
    safe = torch.where(flat_image, torch.ones_like(std), std)
    return torch.where(flat_image.view(shape), torch.zeros_like(x), centered / safe.view(shape))


class MANetOutput(NamedTuple):
    logits: torch.Tensor
    attention: torch.Tensor
    pyramid: FeaturePyramid


class MANet(nn.Module):
    """Backbone + multiscale attention + pooling head.

    ``pooling='attention'`` classifies the flattened feature matrix;
    ``'gap'``/``'gmp'`` classify plain global average/max pooled f3 while
    the attention branch still runs (its maps drive augmentation).
    """

    def __init__(self, num_classes: int, backbone: BackboneConfig | None = None, num_maps: int = 32,
                 scales: Sequence[int] = (2, 3), pooling: str = "attention", zscore: bool = True):
        super().__init__()
        if pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {pooling!r}; choose from {POOLINGS}")
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.backbone = Backbone(backbone)
        cfg = self.backbone.config
        self.attention = AttentionGenerator(cfg.stage_channels, num_maps, scales)
        self.pooling = pooling
        self.zscore = zscore
        c3 = cfg.stage_channels[2]
        self.head = nn.Linear(num_maps * c3 if pooling == "attention" else c3, num_classes)

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    def classify(self, features: torch.Tensor) -> torch.Tensor:
        expected = self.head.in_features
        flat = features.flatten(1)
        if flat.shape[1] != expected:
            raise ValueError(f"feature size {flat.shape[1]} does not match head input {expected}")
        return self.head(flat)

    def forward(self, x: torch.Tensor) -> MANetOutput:
        if self.zscore:
            x = standardize(x)
        pyramid = self.backbone(x)
        attention = self.attention(pyramid)
        if self.pooling == "attention":
            features = attention_pool(pyramid.f3, attention)
        elif self.pooling == "gap":
            features = pyramid.f3.mean(dim=(2, 3))
        else:
            features = pyramid.f3.amax(dim=(2, 3))
        return MANetOutput(self.classify(features), attention, pyramid)


def build_model(num_classes: int, seed: int, **kwargs) -> MANet:
    model = MANet(num_classes, **kwargs)
    return parameter_init(model, seed)


def normalize_attention(attention: np.ndarray | torch.Tensor, j: int | None = None) -> np.ndarray:
    """A_j / max(A_j), or zeros when the map is all zero.

    ``attention`` is either an (N, S, S) stack (pass ``j``) or a single map.
    """
    a = attention.detach().cpu().numpy() if isinstance(attention, torch.Tensor) else np.asarray(attention)
    if j is not None:
        a = a[j]
    a = a.astype(np.float64)
    peak = a.max() if a.size else 0.0
    if peak <= 0:
        return np.zeros_like(a)
    return np.clip(a / peak, 0.0, 1.0)
