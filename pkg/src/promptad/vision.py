"""Toy vision transformer with dual attention paths and multi-stage feature taps.

The encoder is randomly initialized from a seed and frozen. Alongside the
standard query-key path it maintains a second stream whose attention weights
come from value-value similarity: starting at a configured layer, the second
stream accumulates value-value attention outputs computed from the standard
stream's activations (the feed-forward stage is skipped on that stream). Patch
grids from both paths are tapped at a set of layers; the global feature is
the standard path's class token after the final layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig
from .errors import FormatError, InputError
from . import tensorio


@dataclass
class StageFeatures:
    """Patch grids of one tapped layer: (h, w, C) for each attention path."""

    qkv: torch.Tensor
    vv: torch.Tensor


@dataclass
class FeaturePyramid:
    stages: list  # list[StageFeatures]
    global_feature: torch.Tensor  # (C,)
    image_size: tuple  # (H, W) pixels

    def __post_init__(self):
        dims = {s.qkv.shape[-1] for s in self.stages} | {s.vv.shape[-1] for s in self.stages}
        dims |= {self.global_feature.shape[-1]}
        if len(dims) != 1:
            raise InputError(f"inconsistent channel counts across stages: {sorted(dims)}")

    @property
    def channels(self) -> int:
        return self.global_feature.shape[-1]


class DualPathAttention(nn.Module):
    """Multi-head attention exposing both the standard and value-value paths."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        n, w = t.shape
        return t.view(n, self.heads, self.head_dim).transpose(0, 1)  # (heads, n, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self._split(self.q_proj(x)), self._split(self.k_proj(x)), self._split(self.v_proj(x))
        attn = (q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)).softmax(dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(x.shape)
        return self.out_proj(out)

    def vv_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic value-value attention weights, (heads, n, n)."""
        v = self._split(self.v_proj(x))
        return (v @ v.transpose(-2, -1) / math.sqrt(self.head_dim)).softmax(dim=-1)

    def vv_forward(self, x: torch.Tensor) -> torch.Tensor:
        v = self._split(self.v_proj(x))
        attn = (v @ v.transpose(-2, -1) / math.sqrt(self.head_dim)).softmax(dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(x.shape)
        return self.out_proj(out)


class VisionBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = DualPathAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(),
            nn.Linear(mlp_ratio * width, width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class ToyVisionEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, image_size: int, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if image_size % cfg.patch_size != 0:
            raise InputError(f"image size {image_size} not divisible by patch {cfg.patch_size}")
        if max(cfg.tap_layers) > cfg.depth:
            raise InputError("tap layer beyond encoder depth")
        self.cfg = cfg
        self.image_size = image_size
        self.grid = image_size // cfg.patch_size
        width = cfg.embed_dim
        n_tokens = self.grid * self.grid + 1

        self.patch_embed = nn.Linear(3 * cfg.patch_size ** 2, width)
        self.cls_token = nn.Parameter(torch.zeros(1, width))
        self.pos_embed = nn.Parameter(torch.zeros(n_tokens, width))
        self.blocks = nn.ModuleList(
            VisionBlock(width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.ln_final = nn.LayerNorm(width)
        self.proj = nn.Parameter(torch.zeros(width, width))
        self._init_weights(seed)
        self.to(dtype)
        self.requires_grad_(False)
        self.eval()

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        std = self.cfg.init_std
        ln_params = {
            id(p) for m in self.modules() if isinstance(m, nn.LayerNorm) for p in m.parameters()
        }
        with torch.no_grad():
            for p in self.parameters():
                if id(p) in ln_params:
                    continue
                if p.dim() >= 2:
                    p.copy_(torch.randn(p.shape, generator=gen) * std)
                else:
                    p.zero_()
            for m in self.modules():
                if isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.fill_(0.0)
            self.cls_token.copy_(torch.randn(self.cls_token.shape, generator=gen) * std)
            self.proj.copy_(
                torch.randn(self.proj.shape, generator=gen) / math.sqrt(self.cfg.embed_dim))

    @property
    def dtype(self):
        return self.proj.dtype

    def _patchify(self, image: torch.Tensor) -> torch.Tensor:
        p, g = self.cfg.patch_size, self.grid
        patches = image.view(g, p, g, p, 3).permute(0, 2, 1, 3, 4)
        return patches.reshape(g * g, 3 * p * p)

    def encode_image(self, image) -> FeaturePyramid:
        """Image (H, W, 3) in [0, 1] -> per-tap patch grids plus the global feature."""
        if isinstance(image, np.ndarray):
            image = torch.from_numpy(np.ascontiguousarray(image))
        image = image.to(self.dtype)
        if image.dim() != 3 or image.shape[-1] != 3:
            raise InputError(f"expected (H, W, 3) image, got {tuple(image.shape)}")
        h, w = image.shape[:2]
        if h != self.image_size or w != self.image_size:
            raise InputError(
                f"expected {self.image_size}x{self.image_size} input, got {h}x{w}")

        with torch.no_grad():
            x = self.patch_embed(self._patchify(image))
            x = torch.cat([self.cls_token, x], dim=0) + self.pos_embed

            vv_stream = None
            taps: dict[int, StageFeatures] = {}
            for layer, block in enumerate(self.blocks, start=1):
                x_in = x
                x = block(x_in)
                if layer == self.cfg.vv_start_layer:
                    vv_stream = x_in
                if vv_stream is not None and layer >= self.cfg.vv_start_layer:
                    vv_stream = vv_stream + block.attn.vv_forward(block.ln1(x_in))
                if layer in self.cfg.tap_layers:
                    vv_tokens = vv_stream if vv_stream is not None else x
                    taps[layer] = StageFeatures(
                        qkv=self._to_grid(x), vv=self._to_grid(vv_tokens))
            global_feature = self.ln_final(x)[0] @ self.proj

        stages = [taps[layer] for layer in sorted(self.cfg.tap_layers)]
        return FeaturePyramid(stages=stages, global_feature=global_feature,
                              image_size=(h, w))

    def _to_grid(self, tokens: torch.Tensor) -> torch.Tensor:
        g = self.grid
        return tokens[1:].reshape(g, g, -1).clone()

    def vv_attention_weights(self, image, layer: int) -> torch.Tensor:
        """Value-value attention weights at ``layer`` for an input image (testing hook)."""
        if isinstance(image, np.ndarray):
            image = torch.from_numpy(np.ascontiguousarray(image))
        with torch.no_grad():
            x = self.patch_embed(self._patchify(image.to(self.dtype)))
            x = torch.cat([self.cls_token, x], dim=0) + self.pos_embed
            for idx, block in enumerate(self.blocks, start=1):
                if idx == layer:
                    return block.attn.vv_weights(block.ln1(x))
                x = block(x)
        raise InputError(f"layer {layer} beyond depth {self.cfg.depth}")


_META_NAME = "meta"
_GLOBAL_NAME = "global"


def save_feature_pyramid(pyramid: FeaturePyramid, path):
    """Serialize a pyramid to the tensor container format (float32)."""
    tensors = {
        _META_NAME: np.array(
            [len(pyramid.stages), pyramid.image_size[0], pyramid.image_size[1]],
            dtype=np.float32),
        _GLOBAL_NAME: pyramid.global_feature.detach().cpu().numpy(),
    }
    for i, stage in enumerate(pyramid.stages):
        tensors[f"stage{i}/qkv"] = stage.qkv.detach().cpu().numpy()
        tensors[f"stage{i}/vv"] = stage.vv.detach().cpu().numpy()
    tensorio.write_tensors(path, tensors)


def load_feature_pyramid(path) -> FeaturePyramid:
    """Load a pyramid saved by :func:`save_feature_pyramid`; validates the manifest."""
    tensors = tensorio.read_tensors(path)
    if _META_NAME not in tensors:
        raise FormatError(_META_NAME, "missing manifest tensor")
    meta = tensors[_META_NAME]
    if meta.shape != (3,):
        raise FormatError(_META_NAME, f"expected 3 entries, got shape {meta.shape}")
    n_stages, h, w = (int(v) for v in meta)
    if n_stages < 1:
        raise FormatError(_META_NAME, f"invalid stage count {n_stages}")
    expected = {_META_NAME, _GLOBAL_NAME}
    expected |= {f"stage{i}/{path_}" for i in range(n_stages) for path_ in ("qkv", "vv")}
    if set(tensors) != expected:
        missing = expected - set(tensors)
        extra = set(tensors) - expected
        detail = f"missing {sorted(missing)}" if missing else f"unexpected {sorted(extra)}"
        raise FormatError("stages", f"manifest stage count {n_stages} != payload tensors ({detail})")
    if tensors[_GLOBAL_NAME].ndim != 1:
        raise FormatError(_GLOBAL_NAME, "global feature must be rank 1")
    stages = []
    for i in range(n_stages):
        qkv, vv = tensors[f"stage{i}/qkv"], tensors[f"stage{i}/vv"]
        if qkv.ndim != 3 or vv.shape != qkv.shape:
            raise FormatError(f"stage{i}", f"bad grid shapes {qkv.shape} / {vv.shape}")
        stages.append(StageFeatures(qkv=torch.from_numpy(qkv), vv=torch.from_numpy(vv)))
    return FeaturePyramid(stages=stages,
                          global_feature=torch.from_numpy(tensors[_GLOBAL_NAME]),
                          image_size=(h, w))
