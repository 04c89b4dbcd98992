"""Anomaly-map algebra: per-stage text interaction, aggregation, fusion inputs.

All maps are (H, W) tensors in [0, 1]. Normalization is per-map min-max with
the tie rule that a constant map normalizes to all zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputError


def minmax_normalize(m: torch.Tensor) -> torch.Tensor:
    """Rescale to [0, 1]; a constant map becomes all zeros."""
    lo = m.min()
    hi = m.max()
    if (hi - lo).detach().item() > 0.0:
        return (m - lo) / (hi - lo)
    return torch.zeros_like(m)


def upsample_bilinear(m: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize to (H, W); align-corners disabled."""
    if tuple(m.shape) == tuple(size):
        return m
    return F.interpolate(m[None, None], size=tuple(size), mode="bilinear",
                         align_corners=False)[0, 0]


@dataclass
class StageMaps:
    normal: torch.Tensor
    anomaly: torch.Tensor

    def __post_init__(self):
        if self.normal.shape != self.anomaly.shape:
            raise InputError("stage map pair must share resolution")


def stage_interaction(grid: torch.Tensor, t_n: torch.Tensor, t_a: torch.Tensor,
                      kernels, target_size, logit_scale: float = 1.0) -> StageMaps:
    """Text-guided aggregation of one stage into a normal/anomaly map pair.

    Per kernel, aggregated features are scored against the two text vectors
    with a per-location two-way softmax; kernel maps are summed, min-max
    normalized, and bilinearly upsampled to ``target_size``.
    """
    if not kernels:
        raise InputError("stage interaction needs at least one kernel")
    total = None
    for kernel in kernels:
        agg = kernel.aggregate(grid)
        logits = torch.stack([agg @ t_n, agg @ t_a], dim=-1) * logit_scale
        probs = logits.softmax(dim=-1)
        total = probs if total is None else total + probs
    normal = upsample_bilinear(minmax_normalize(total[..., 0]), target_size)
    anomaly = upsample_bilinear(minmax_normalize(total[..., 1]), target_size)
    return StageMaps(normal=normal, anomaly=anomaly)


def aggregate_stages(stage_maps) -> tuple:
    """Sum per-stage maps channel-wise and min-max normalize each channel."""
    if not stage_maps:
        raise ConfigurationError("no stage maps to aggregate")
    shapes = {tuple(sm.normal.shape) for sm in stage_maps}
    if len(shapes) != 1:
        raise ConfigurationError(f"stage maps disagree on resolution: {sorted(shapes)}")
    normal_sum = torch.stack([sm.normal for sm in stage_maps]).sum(dim=0)
    anomaly_sum = torch.stack([sm.anomaly for sm in stage_maps]).sum(dim=0)
    return minmax_normalize(normal_sum), minmax_normalize(anomaly_sum)


def vl_map(m_n: torch.Tensor, m_a: torch.Tensor) -> torch.Tensor:
    """Combine the two channels: (anomaly + (1 - normal)) / 2."""
    if m_n.shape != m_a.shape:
        raise InputError("map resolutions differ")
    return (m_a + (1.0 - m_n)) / 2.0
