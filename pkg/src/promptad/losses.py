"""Training losses: global cross-entropy, pixel focal loss, dice loss."""

from __future__ import annotations

import torch

from .errors import InputError

PROB_FLOOR = 1e-12
PIXEL_EPS = 1e-6
DICE_EPS = 1.0


def loss_global(prob_pair: torch.Tensor, label: int) -> torch.Tensor:
    """Cross-entropy of the two-way normal/abnormal probability."""
    if label not in (0, 1):
        raise InputError(f"label must be 0 or 1, got {label}")
    return -torch.log(prob_pair[label].clamp_min(PROB_FLOOR))


def loss_focal(m_a: torch.Tensor, mask: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Mean of -(1 - p_t)^gamma log(p_t); p_t is the map at positives and its
    complement at negatives. The map is clamped away from {0, 1}."""
    if m_a.shape != mask.shape:
        raise InputError("map and mask resolutions differ")
    p = m_a.clamp(PIXEL_EPS, 1.0 - PIXEL_EPS)
    target = mask.to(p.dtype)
    p_t = p * target + (1.0 - p) * (1.0 - target)
    return (-((1.0 - p_t) ** gamma) * torch.log(p_t)).mean()


def loss_dice(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - (2 intersection + eps) / (sum pred + sum target + eps), eps = 1."""
    if pred.shape != target.shape:
        raise InputError("map and mask resolutions differ")
    t = target.to(pred.dtype)
    inter = (pred * t).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (pred.sum() + t.sum() + DICE_EPS)


def loss_local(m_n: torch.Tensor, m_a: torch.Tensor, mask: torch.Tensor,
               gamma: float = 2.0) -> torch.Tensor:
    """Pixel loss of the map pair: focal on the anomaly channel plus dice on
    both channels (the normal channel against the inverted mask)."""
    t = mask.to(m_a.dtype)
    return (loss_focal(m_a, t, gamma)
            + loss_dice(m_a, t)
            + loss_dice(m_n, 1.0 - t))
