"""Few-shot branch: normal-feature memory banks, patch matching, map fusion.

Memory rows are L2-normalized at insertion so the minimum cosine distance
reduces to 1 minus the maximum dot product. The final fusion averages the
vision-language and few-shot maps and applies truncated Gaussian smoothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, FormatError
from .grounding import BoundingBoxSet, suppress
from .maps import minmax_normalize
from . import tensorio


@dataclass
class MemoryBank:
    stages: list  # list[(N_i, C) unit-row tensors]
    class_name: str
    shot_count: int


def build_memory(reference_pyramids, class_name: str = "") -> MemoryBank:
    """Concatenate normalized patch features of normal references, per stage.

    Row order is deterministic: shot index first, then row-major spatial.
    """
    if not reference_pyramids:
        raise ConfigurationError("need at least one reference pyramid")
    n_stages = len(reference_pyramids[0].stages)
    shapes = [tuple(s.qkv.shape) for s in reference_pyramids[0].stages]
    for pyr in reference_pyramids[1:]:
        if len(pyr.stages) != n_stages or [tuple(s.qkv.shape) for s in pyr.stages] != shapes:
            raise ConfigurationError("reference pyramids have inconsistent stage shapes")
    stages = []
    for i in range(n_stages):
        rows = [F.normalize(pyr.stages[i].qkv.reshape(-1, shapes[i][-1]), dim=-1)
                for pyr in reference_pyramids]
        stages.append(torch.cat(rows, dim=0))
    return MemoryBank(stages=stages, class_name=class_name,
                      shot_count=len(reference_pyramids))


def match_stage(patch_grid: torch.Tensor, bank_stage: torch.Tensor) -> torch.Tensor:
    """Per-patch minimum cosine distance to the bank rows, shape (H, W)."""
    if patch_grid.shape[-1] != bank_stage.shape[-1]:
        raise ConfigurationError(
            f"channel mismatch: grid {patch_grid.shape[-1]} vs bank {bank_stage.shape[-1]}")
    h, w, c = patch_grid.shape
    q = F.normalize(patch_grid.reshape(-1, c), dim=-1)
    sims = q @ bank_stage.T
    return (1.0 - sims.max(dim=1).values).reshape(h, w)


def fewshot_map(stage_scores, boxes: BoundingBoxSet,
                suppression_lambda: float) -> torch.Tensor:
    """Sum per-stage score grids (already at a common resolution), min-max
    normalize, then apply grounding suppression."""
    shapes = {tuple(s.shape) for s in stage_scores}
    if len(shapes) != 1:
        raise ConfigurationError(f"stage scores disagree on resolution: {sorted(shapes)}")
    total = torch.stack(list(stage_scores)).sum(dim=0)
    return suppress(minmax_normalize(total), boxes, suppression_lambda)


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Mirror indexing without edge duplication; folds for pad >= n."""
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def gaussian_kernel_1d(sigma: float, dtype=torch.float64) -> torch.Tensor:
    """Truncated at radius ceil(3 sigma), renormalized to sum 1."""
    radius = math.ceil(3.0 * sigma)
    xs = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_smooth(m: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding; sigma < 0.01 is a no-op."""
    if sigma < 0.01:
        return m
    h, w = m.shape
    kernel = gaussian_kernel_1d(sigma, dtype=m.dtype)
    radius = (kernel.shape[0] - 1) // 2
    padded = m[_reflect_indices(h, radius)][:, _reflect_indices(w, radius)]
    x = padded[None, None]
    x = F.conv2d(x, kernel.view(1, 1, -1, 1))
    x = F.conv2d(x, kernel.view(1, 1, 1, -1))
    return x[0, 0]


def fuse_final(m_vl: torch.Tensor, m_few: torch.Tensor | None,
               sigma: float) -> torch.Tensor:
    """Average the two branches when both exist, then Gaussian-smooth."""
    if m_few is None:
        combined = m_vl
    else:
        if m_few.shape != m_vl.shape:
            raise ConfigurationError("fusion inputs disagree on resolution")
        combined = (m_vl + m_few) / 2.0
    return gaussian_smooth(combined, sigma)


_CLASS_PREFIX = "class/"


def save_memory_bank(bank: MemoryBank, path: str | Path):
    tensors = {f"{_CLASS_PREFIX}{bank.class_name}": np.array([bank.shot_count],
                                                             dtype=np.float32)}
    for i, stage in enumerate(bank.stages):
        tensors[f"stage{i}"] = stage.detach().cpu().numpy()
    tensorio.write_tensors(path, tensors)


def load_memory_bank(path: str | Path) -> MemoryBank:
    tensors = tensorio.read_tensors(path)
    class_name = None
    shots = 0
    stages = {}
    for name, arr in tensors.items():
        if name.startswith(_CLASS_PREFIX):
            class_name = name[len(_CLASS_PREFIX):]
            shots = int(arr[0])
        elif name.startswith("stage"):
            stages[int(name[len("stage"):])] = torch.from_numpy(arr)
        else:
            raise FormatError(name, "unexpected tensor in memory bank container")
    if class_name is None:
        raise FormatError("class", "memory bank container lacks a class tensor")
    if sorted(stages) != list(range(len(stages))) or not stages:
        raise FormatError("stage", "memory bank stages are not contiguous")
    return MemoryBank(stages=[stages[i] for i in range(len(stages))],
                      class_name=class_name, shot_count=shots)
