"""Prompt banks: fixed and learnable templates, runtime filtering, explanation.

Fixed prompts follow "a {domain} photo of {state} {cls} with {anomaly} at
{position}". Learnable prompts replace the leading words with trained context
vectors (separate sets for normal and abnormal templates); in conditional
mode a meta-network turns the image's global feature into an offset added to
every context vector.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import PromptConfig
from .errors import InputError
from .textenc import ToyTextEncoder, TokenSequence, tokenize
from .vocabulary import AnomalyVocabulary

NORMAL = "normal"
ABNORMAL = "abnormal"

GENERIC_CLASS_WORD = "object"


@dataclass
class PromptRecord:
    text: str
    role: str  # NORMAL | ABNORMAL
    anomaly_class: str | None
    position: str | None
    embedding: torch.Tensor  # (C,) unit vector
    learned: bool = False

    def __post_init__(self):
        if self.role not in (NORMAL, ABNORMAL):
            raise InputError(f"bad role {self.role!r}")
        if self.role == NORMAL and self.anomaly_class is not None:
            raise InputError("normal prompts cannot carry an anomaly class")


@dataclass
class TextFeatureBank:
    normal: list
    abnormal: list

    def __post_init__(self):
        if not self.normal or not self.abnormal:
            raise InputError("prompt bank requires non-empty normal and abnormal sets")
        dims = {r.embedding.shape[-1] for r in self.normal + self.abnormal}
        if len(dims) != 1:
            raise InputError(f"mixed embedding dims in bank: {sorted(dims)}")

    def mean_embeddings(self):
        """Unit-normalized means of the two sides, differentiable."""
        t_n = F.normalize(torch.stack([r.embedding for r in self.normal]).mean(0), dim=-1)
        t_a = F.normalize(torch.stack([r.embedding for r in self.abnormal]).mean(0), dim=-1)
        return t_n, t_a


class PromptLearner(nn.Module):
    """Trainable context vectors plus the conditional meta-network."""

    def __init__(self, n_prefix: int, text_width: int, embed_dim: int,
                 learn_method: str = "cocoop", seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if learn_method not in ("coop", "cocoop"):
            raise InputError(f"unknown learn_method {learn_method!r}")
        self.learn_method = learn_method
        self.n_prefix = n_prefix
        gen = torch.Generator().manual_seed(seed)
        self.normal_prefix = nn.Parameter(torch.randn(n_prefix, text_width, generator=gen) * 0.02)
        self.abnormal_prefix = nn.Parameter(torch.randn(n_prefix, text_width, generator=gen) * 0.02)
        hidden = max(1, embed_dim // 4)
        self.meta_w1 = nn.Parameter(torch.randn(hidden, embed_dim, generator=gen) * 0.02)
        self.meta_b1 = nn.Parameter(torch.zeros(hidden))
        self.meta_w2 = nn.Parameter(torch.randn(text_width, hidden, generator=gen) * 0.02)
        self.meta_b2 = nn.Parameter(torch.zeros(text_width))
        self.to(dtype)

    def meta_offset(self, image_feature: torch.Tensor) -> torch.Tensor | None:
        """Conditional offset from the (raw) global image feature; None in plain mode."""
        if self.learn_method != "cocoop":
            return None
        g = F.normalize(image_feature.to(self.meta_w1.dtype), dim=-1)
        h = F.relu(g @ self.meta_w1.T + self.meta_b1)
        return h @ self.meta_w2.T + self.meta_b2


def _normal_texts(cfg: PromptConfig, cls: str):
    return [(f"a {cfg.domain} photo of {state} {cls}", state) for state in cfg.normal_states]


def _abnormal_texts(cfg: PromptConfig, cls: str, anomaly_types, positions):
    out = []
    for anomaly in anomaly_types:
        if positions:
            for pos in positions:
                out.append((
                    f"a {cfg.domain} photo of {cfg.abnormal_state} {cls} with {anomaly} at {pos}",
                    anomaly, pos))
        else:
            out.append((
                f"a {cfg.domain} photo of {cfg.abnormal_state} {cls} with {anomaly}",
                anomaly, None))
    return out


def _learnable_suffixes(cfg: PromptConfig, cls: str, anomaly_types, positions):
    normal = [(f"{state} {cls}", state) for state in cfg.normal_states]
    abnormal = []
    for anomaly in anomaly_types:
        if positions:
            for pos in positions:
                abnormal.append((f"{cfg.abnormal_state} {cls} with {anomaly} at {pos}",
                                 anomaly, pos))
        else:
            abnormal.append((f"{cfg.abnormal_state} {cls} with {anomaly}", anomaly, None))
    return normal, abnormal


class PromptBuilder:
    """Assembles prompt banks against one frozen text encoder."""

    def __init__(self, text_encoder: ToyTextEncoder, learner: PromptLearner,
                 cfg: PromptConfig):
        self.encoder = text_encoder
        self.learner = learner
        self.cfg = cfg
        self._fixed_cache: dict = {}

    def assemble(self, class_name: str, vocabulary: AnomalyVocabulary,
                 positions: list, template_mode: str | None = None,
                 include_class_name: bool | None = None,
                 image_feature: torch.Tensor | None = None) -> TextFeatureBank:
        """Build the prompt bank for one image.

        ``image_feature`` (raw global feature) is required only in conditional
        learnable mode, where it feeds the meta-network.
        """
        mode = template_mode if template_mode is not None else self.cfg.template_mode
        if mode not in ("fixed", "learnable", "both"):
            raise InputError(f"unknown template_mode {mode!r}")
        use_cls = self.cfg.include_class_name if include_class_name is None else include_class_name
        cls = class_name if use_cls else GENERIC_CLASS_WORD
        anomaly_types = list(vocabulary.anomaly_types)
        if not anomaly_types:
            raise InputError("vocabulary has no anomaly types")
        positions = list(positions)

        normal: list = []
        abnormal: list = []
        if mode in ("fixed", "both"):
            self._fixed_records(cls, anomaly_types, positions, normal, abnormal)
        if mode in ("learnable", "both"):
            self._learnable_records(cls, anomaly_types, positions, image_feature,
                                    normal, abnormal)
        return TextFeatureBank(normal=normal, abnormal=abnormal)

    def _fixed_records(self, cls, anomaly_types, positions, normal, abnormal):
        key = (cls, tuple(anomaly_types), tuple(positions), self.cfg.domain)
        cached = self._fixed_cache.get(key)
        if cached is None:
            n_texts = _normal_texts(self.cfg, cls)
            a_texts = _abnormal_texts(self.cfg, cls, anomaly_types, positions)
            seqs = [tokenize(t, 0, self.encoder.cfg.max_len)
                    for t, *_ in n_texts + a_texts]
            with torch.no_grad():
                emb = self.encoder.encode_batch(seqs)
            cached = (n_texts, a_texts, emb)
            self._fixed_cache[key] = cached
        n_texts, a_texts, emb = cached
        for i, (text, _state) in enumerate(n_texts):
            normal.append(PromptRecord(text, NORMAL, None, None, emb[i]))
        for j, (text, anomaly, pos) in enumerate(a_texts):
            abnormal.append(PromptRecord(text, ABNORMAL, anomaly, pos,
                                         emb[len(n_texts) + j]))

    def _learnable_records(self, cls, anomaly_types, positions, image_feature,
                           normal, abnormal):
        n_suffix, a_suffix = _learnable_suffixes(self.cfg, cls, anomaly_types, positions)
        n = self.learner.n_prefix
        offset = None
        if self.learner.learn_method == "cocoop":
            if image_feature is None:
                raise InputError("conditional prompts need the global image feature")
            offset = self.learner.meta_offset(image_feature)

        def encode(texts, prefix):
            seqs = [tokenize(t, n, self.encoder.cfg.max_len) for t, *_ in texts]
            vectors = prefix if offset is None else prefix + offset.view(1, -1)
            return self.encoder.encode_batch(seqs, vectors)

        n_emb = encode(n_suffix, self.learner.normal_prefix)
        a_emb = encode(a_suffix, self.learner.abnormal_prefix)
        for i, (text, _state) in enumerate(n_suffix):
            normal.append(PromptRecord(text, NORMAL, None, None, n_emb[i], learned=True))
        for j, (text, anomaly, pos) in enumerate(a_suffix):
            abnormal.append(PromptRecord(text, ABNORMAL, anomaly, pos, a_emb[j],
                                         learned=True))


def cosine_distances(image_feature: torch.Tensor, records: list) -> list:
    """1 - <image, embedding> per record, computed in float64 for stable ordering."""
    img = image_feature.detach().cpu().double().numpy()
    out = []
    for r in records:
        emb = r.embedding.detach().cpu().double().numpy()
        out.append(1.0 - float(np.dot(img, emb)))
    return out


def runtime_prompt_filter(image_feature: torch.Tensor,
                          bank: TextFeatureBank) -> TextFeatureBank:
    """Drop prompts whose image distance falls inside the normal/abnormal overlap.

    The overlap interval is [max(min Dn, min Da), min(max Dn, max Da)], endpoints
    inclusive. An empty interval removes nothing; a side that would be emptied
    keeps its single minimum-distance record (first on ties).
    """
    d_n = cosine_distances(image_feature, bank.normal)
    d_a = cosine_distances(image_feature, bank.abnormal)
    lo = max(min(d_n), min(d_a))
    hi = min(max(d_n), max(d_a))
    if lo > hi:
        return TextFeatureBank(normal=list(bank.normal), abnormal=list(bank.abnormal))

    def survivors(records, dists):
        keep = [r for r, d in zip(records, dists) if not (lo <= d <= hi)]
        if not keep:
            keep = [records[int(np.argmin(dists))]]
        return keep

    return TextFeatureBank(normal=survivors(bank.normal, d_n),
                           abnormal=survivors(bank.abnormal, d_a))


def explain(image_feature: torch.Tensor, bank: TextFeatureBank) -> list:
    """Abnormal prompts ranked by similarity to the image, most similar first."""
    sims = [1.0 - d for d in cosine_distances(image_feature, bank.abnormal)]
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    return [(bank.abnormal[i].anomaly_class, bank.abnormal[i].position, sims[i])
            for i in order]
