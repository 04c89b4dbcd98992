"""Byte-level toy text encoder with learnable prefix slots.

The encoder is a small causal transformer, randomly initialized from a seed
and frozen. Prompts that carry learnable context vectors reserve slots right
after BOS; the slot embeddings are replaced at encode time, which keeps the
output differentiable with respect to the injected vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import TextEncoderConfig
from .errors import ConfigurationError, InputError

BOS_ID = 256
EOS_ID = 257
PREFIX_ID = 258
PAD_ID = 259
VOCAB_SIZE = 260


@dataclass(frozen=True)
class TokenSequence:
    """Token ids for one prompt; the first ``prefix_slots`` ids after BOS are placeholders."""

    token_ids: tuple
    prefix_slots: int

    def __post_init__(self):
        if any(t < 0 or t >= VOCAB_SIZE for t in self.token_ids):
            raise InputError("token id outside vocabulary")
        if self.prefix_slots > len(self.token_ids):
            raise InputError("prefix_slots exceeds sequence length")

    def __len__(self):
        return len(self.token_ids)


def tokenize(text: str, prefix_slots: int = 0, max_len: int = 128) -> TokenSequence:
    """Byte-level tokenization: BOS, prefix placeholders, utf-8 bytes, EOS."""
    body = list(text.encode("utf-8"))
    ids = [BOS_ID] + [PREFIX_ID] * prefix_slots + body + [EOS_ID]
    if len(ids) > max_len:
        raise InputError(f"prompt too long: {len(ids)} tokens > max_len {max_len}")
    return TokenSequence(tuple(ids), prefix_slots)


class CausalBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.ln1 = nn.LayerNorm(width)
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(),
            nn.Linear(mlp_ratio * width, width),
        )

    def attend(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape
        shape = (b, n, self.heads, self.head_dim)
        q = self.q_proj(x).view(shape).transpose(1, 2)
        k = self.k_proj(x).view(shape).transpose(1, 2)
        v = self.v_proj(x).view(shape).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        logits = logits.masked_fill(~mask, float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, w)
        return self.out_proj(out)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attend(self.ln1(x), mask)
        x = x + self.mlp(self.ln2(x))
        return x


class ToyTextEncoder(nn.Module):
    """Frozen causal transformer; output is the EOS-token embedding, unit-normalized."""

    def __init__(self, cfg: TextEncoderConfig, embed_dim: int, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.token_embed = nn.Embedding(VOCAB_SIZE, cfg.width)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_len, cfg.width))
        self.blocks = nn.ModuleList(
            CausalBlock(cfg.width, cfg.heads) for _ in range(cfg.depth)
        )
        self.ln_final = nn.LayerNorm(cfg.width)
        self.proj = nn.Parameter(torch.zeros(cfg.width, embed_dim))
        self._init_weights(seed)
        self.to(dtype)
        self.requires_grad_(False)
        self.eval()

    def _init_weights(self, seed: int):
        # every parameter comes from the seeded generator (or a constant) so
        # construction is reproducible regardless of global RNG state
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
            self.proj.copy_(torch.randn(self.proj.shape, generator=gen) / math.sqrt(self.cfg.width))

    @property
    def dtype(self):
        return self.proj.dtype

    def encode(self, tokens: TokenSequence, prefix_vectors: torch.Tensor | None = None,
               meta_offset: torch.Tensor | None = None) -> torch.Tensor:
        """Encode one prompt to a unit vector in the joint embedding space."""
        prefix = None
        if tokens.prefix_slots or (prefix_vectors is not None and prefix_vectors.shape[0] > 0):
            if prefix_vectors is None or prefix_vectors.shape[0] != tokens.prefix_slots:
                got = 0 if prefix_vectors is None else prefix_vectors.shape[0]
                raise ConfigurationError(
                    f"prefix vector count {got} != reserved slots {tokens.prefix_slots}")
            prefix = prefix_vectors.unsqueeze(0)
            if meta_offset is not None:
                prefix = prefix + meta_offset.to(prefix.dtype).view(1, 1, -1)
        return self.encode_batch([tokens], prefix)[0]

    def encode_batch(self, sequences: list[TokenSequence],
                     prefix_vectors: torch.Tensor | None = None) -> torch.Tensor:
        """Encode prompts sharing one prefix layout; returns (B, embed_dim) unit rows.

        ``prefix_vectors`` is (n, width) shared across the batch or (B, n, width).
        Right padding cannot leak into the outputs because attention is causal
        and each output is read at the EOS position.
        """
        if not sequences:
            return torch.zeros(0, self.embed_dim, dtype=self.dtype)
        n_slots = sequences[0].prefix_slots
        if any(s.prefix_slots != n_slots for s in sequences):
            raise ConfigurationError("batched sequences must share prefix layout")
        lengths = [len(s) for s in sequences]
        max_n = max(lengths)
        if max_n > self.cfg.max_len:
            raise InputError(f"sequence length {max_n} > max_len {self.cfg.max_len}")
        ids = torch.full((len(sequences), max_n), PAD_ID, dtype=torch.long)
        for i, s in enumerate(sequences):
            ids[i, : len(s)] = torch.tensor(s.token_ids, dtype=torch.long)

        x = self.token_embed(ids)
        if n_slots:
            if prefix_vectors is None:
                raise ConfigurationError(f"prefix vectors required for {n_slots} slots")
            if prefix_vectors.dim() == 2:
                prefix_vectors = prefix_vectors.unsqueeze(0).expand(len(sequences), -1, -1)
            if prefix_vectors.shape[1] != n_slots:
                raise ConfigurationError(
                    f"prefix vector count {prefix_vectors.shape[1]} != reserved slots {n_slots}")
            x = torch.cat(
                [x[:, :1], prefix_vectors.to(x.dtype), x[:, 1 + n_slots:]], dim=1)
        x = x + self.pos_embed[:max_n]

        mask = torch.ones(max_n, max_n, dtype=torch.bool).tril()
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_final(x)
        eos = torch.stack([x[i, n - 1] for i, n in enumerate(lengths)])
        feat = eos @ self.proj
        return F.normalize(feat, dim=-1)
