"""Bottleneck adapter for the global image feature and the global anomaly score."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputError
from .prompts import TextFeatureBank


class Adapter(nn.Module):
    """Two linear layers with a bottleneck: y = SiLU(W2 ReLU(W1 x + b1) + b2)."""

    def __init__(self, dim: int, hidden: int | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        hidden = hidden if hidden is not None else max(1, dim // 4)
        if hidden >= dim:
            raise InputError(f"adapter hidden width {hidden} must be < {dim}")
        gen = torch.Generator().manual_seed(seed)
        self.w1 = nn.Parameter(torch.randn(hidden, dim, generator=gen) * 0.02)
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.w2 = nn.Parameter(torch.randn(dim, hidden, generator=gen) * 0.02)
        self.b2 = nn.Parameter(torch.zeros(dim))
        self.to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(x @ self.w1.T + self.b1)
        return F.silu(h @ self.w2.T + self.b2)


def adapter_forward(x: torch.Tensor, adapter: Adapter) -> torch.Tensor:
    if x.shape[-1] != adapter.w1.shape[1]:
        raise InputError(f"adapter expects dim {adapter.w1.shape[1]}, got {x.shape[-1]}")
    return adapter(x)


def global_score(g_raw: torch.Tensor, adapter: Adapter, bank: TextFeatureBank,
                 anomaly_map: torch.Tensor | None, temperature: float = 100.0):
    """Two-way normal/abnormal probability plus the anomaly map peak.

    Returns (score, prob_pair) where prob_pair = softmax(temperature *
    (g.t_n, g.t_a)) and score = prob_pair[abnormal] + max(anomaly_map).
    """
    if temperature <= 0:
        raise InputError("temperature must be positive")
    g = F.normalize(adapter(g_raw), dim=-1)
    t_n, t_a = bank.mean_embeddings()
    logits = temperature * torch.stack([g @ t_n, g @ t_a])
    prob_pair = logits.softmax(dim=0)
    peak = anomaly_map.max() if anomaly_map is not None else g.new_zeros(())
    return prob_pair[1] + peak, prob_pair
