"""Cross-entropy with soft-distance regularization between the primary
prediction and the auxiliary (augmented-input) predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

CONSISTENCY_MODES = ("soft", "l2", "none")


@dataclass
class LossBreakdown:
    l_ce: float
    d_bar: float
    l_reg: float


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    k = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"label out of range for {k} classes")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    _check_labels(logits, labels)
    return F.cross_entropy(logits, labels)


def soft_target(logits: torch.Tensor, labels: torch.Tensor, theta: float = 0.7) -> torch.Tensor:
    """Detached per-sample target P': the primary softmax where its max entry
    exceeds ``theta``, the one-hot ground truth otherwise."""
    with torch.no_grad():
        prob = logits.softmax(dim=-1)
        onehot = F.one_hot(labels, logits.shape[-1]).to(prob.dtype)
        confident = prob.amax(dim=-1, keepdim=True) > theta
        return torch.where(confident, prob, onehot)


def distance_to_target(target: torch.Tensor, aux_logits: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean of |target - softmax(p)| over classes, auxiliaries and batch."""
    if not aux_logits:
        return target.new_zeros(())
    d = torch.stack([(target - p.softmax(dim=-1)).abs() for p in aux_logits])  # (A, B, K)
    return d.mean(dim=(0, 2)).mean()


def soft_distance(logits: torch.Tensor, aux_logits: Sequence[torch.Tensor], labels: torch.Tensor,
                  theta: float = 0.7) -> torch.Tensor:
    _check_labels(logits, labels)
    for p in aux_logits:
        if p.shape != logits.shape:
            raise ValueError(f"auxiliary shape {tuple(p.shape)} != primary {tuple(logits.shape)}")
    if not aux_logits:
        return logits.new_zeros(())
    return distance_to_target(soft_target(logits, labels, theta), aux_logits)


def l2_consistency(logits: torch.Tensor, aux_logits: Sequence[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
    """Mean squared distance of every prediction (primary and auxiliaries) to the one-hot label."""
    _check_labels(logits, labels)
    onehot = F.one_hot(labels, logits.shape[-1]).to(logits.dtype)
    d = torch.stack([(onehot - p.softmax(dim=-1)) ** 2 for p in [logits, *aux_logits]])
    return d.mean(dim=(0, 2)).mean()


def total_loss(logits: torch.Tensor, aux_logits: Sequence[torch.Tensor], labels: torch.Tensor,
               theta: float = 0.7, consistency: str = "soft") -> tuple[torch.Tensor, LossBreakdown]:
    """L_reg = L_ce(primary) + d_bar; returns the differentiable loss and its float breakdown."""
    if consistency not in CONSISTENCY_MODES:
        raise ValueError(f"unknown consistency {consistency!r}; choose from {CONSISTENCY_MODES}")
    l_ce = cross_entropy(logits, labels)
    if consistency == "soft":
        d_bar = soft_distance(logits, aux_logits, labels, theta)
    elif consistency == "l2" and aux_logits:
        d_bar = l2_consistency(logits, aux_logits, labels)
    else:
        d_bar = logits.new_zeros(())
    ce, d = float(l_ce.detach()), float(d_bar.detach())
    return l_ce + d_bar, LossBreakdown(ce, d, ce + d)
