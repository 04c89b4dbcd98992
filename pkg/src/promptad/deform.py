"""Deformable feature aggregation over patch grids.

Each kernel owns a fixed tap layout (its size/shape), one scalar weight per
tap, a channel projection, and a small convolution that predicts continuous
per-location tap offsets. Sampling is bilinear with zero padding outside the
grid, so the whole operator is differentiable in the grid, the weights, and
the offsets. With the offset predictor at zero the operator reduces to a
rigid convolution over the tap layout.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import InputError


def parse_kernel_shape(spec: str) -> list:
    """"3x3" / "1x5" / ... -> centered (dy, dx) integer tap offsets, row-major."""
    try:
        kh, kw = (int(v) for v in spec.lower().split("x"))
    except ValueError as exc:
        raise InputError(f"bad kernel spec {spec!r} (expected HxW)") from exc
    if kh < 1 or kw < 1:
        raise InputError(f"bad kernel spec {spec!r}")
    return [(dy - (kh - 1) // 2, dx - (kw - 1) // 2)
            for dy in range(kh) for dx in range(kw)]


def bilinear_sample(grid: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample (H, W, C) ``grid`` at float coordinates; outside contributes zero."""
    h, w, _ = grid.shape
    y0 = torch.floor(ys)
    x0 = torch.floor(xs)
    wy = ys - y0
    wx = xs - x0
    flat = grid.reshape(h * w, -1)
    out = None
    for dy, dx, weight in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yi = (y0 + dy).long()
        xi = (x0 + dx).long()
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(-1)
        vals = flat[idx].reshape(*ys.shape, -1)
        term = (weight * valid.to(grid.dtype)).unsqueeze(-1) * vals
        out = term if out is None else out + term
    return out


class DeformableKernel(nn.Module):
    """One tap layout with trainable projection, tap weights, and offset predictor."""

    def __init__(self, base_offsets, channels: int, deformable: bool = True,
                 train_taps: bool = True, dtype: torch.dtype = torch.float32):
        super().__init__()
        if not base_offsets:
            raise InputError("kernel needs at least one tap")
        k = len(base_offsets)
        self.channels = channels
        offs = torch.tensor(base_offsets, dtype=torch.float64)
        self.register_buffer("base_offsets", offs)
        self.tap_weights = nn.Parameter(torch.full((k,), 1.0 / k), requires_grad=train_taps)
        self.projection = nn.Parameter(torch.eye(channels))
        if deformable:
            self.offset_conv = nn.Conv2d(channels, 2 * k, kernel_size=3, padding=1)
            with torch.no_grad():
                self.offset_conv.weight.zero_()
                self.offset_conv.bias.zero_()
        else:
            self.offset_conv = None
        self.to(dtype)

    @property
    def n_taps(self) -> int:
        return self.base_offsets.shape[0]

    def predicted_offsets(self, grid: torch.Tensor) -> torch.Tensor:
        """(H, W, K, 2) continuous offsets; zeros when the predictor is disabled."""
        h, w, _ = grid.shape
        if self.offset_conv is None:
            return grid.new_zeros(h, w, self.n_taps, 2)
        x = grid.permute(2, 0, 1).unsqueeze(0)
        off = self.offset_conv(x)[0].permute(1, 2, 0)
        return off.reshape(h, w, self.n_taps, 2)

    def aggregate(self, grid: torch.Tensor) -> torch.Tensor:
        """out(p) = Proj(sum_k w_k * grid(p + o_k + do_k(p))), shape (H, W, C)."""
        if grid.dim() != 3 or grid.shape[0] < 1 or grid.shape[1] < 1:
            raise InputError(f"expected non-degenerate (H, W, C) grid, got {tuple(grid.shape)}")
        h, w, _ = grid.shape
        offsets = self.predicted_offsets(grid)
        base = self.base_offsets.to(grid.dtype)
        ys = torch.arange(h, dtype=grid.dtype).view(h, 1, 1)
        xs = torch.arange(w, dtype=grid.dtype).view(1, w, 1)
        py = ys + base[:, 0].view(1, 1, -1) + offsets[..., 0]
        px = xs + base[:, 1].view(1, 1, -1) + offsets[..., 1]
        samples = bilinear_sample(grid, py, px)  # (H, W, K, C)
        agg = (samples * self.tap_weights.view(1, 1, -1, 1)).sum(dim=2)
        return agg @ self.projection.T


def deformable_aggregate(grid: torch.Tensor, kernel: DeformableKernel) -> torch.Tensor:
    """Functional form of :meth:`DeformableKernel.aggregate`."""
    return kernel.aggregate(grid)
