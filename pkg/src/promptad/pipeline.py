"""End-to-end detector: encoders, prompt bank, localization, scoring, bundles."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import prompts as prompts_mod
from .adapter import Adapter, global_score
from .config import Config, load_config, save_config
from .deform import DeformableKernel, parse_kernel_shape
from .errors import ConfigurationError
from .fewshot import MemoryBank, build_memory, fewshot_map, fuse_final, match_stage
from .grounding import (BoundingBoxSet, FileBoxProvider, NullBoxProvider,
                        StubBoxProvider, detect, positions_from_boxes, suppress)
from .maps import aggregate_stages, stage_interaction, upsample_bilinear, vl_map
from .prompts import PromptBuilder, PromptLearner
from .textenc import ToyTextEncoder
from .tensorio import read_tensors, write_tensors
from .vision import FeaturePyramid, ToyVisionEncoder
from .vocabulary import VocabularyCache, fetch_anomaly_vocabulary

log = logging.getLogger(__name__)

# role-specific seed offsets keep the frozen submodules decorrelated
_SEED_VISION = 101
_SEED_TEXT = 211
_SEED_LEARNER = 307
_SEED_ADAPTER = 401


@dataclass
class InferenceResult:
    score: torch.Tensor  # scalar
    prob_pair: torch.Tensor  # (2,) normal/abnormal probabilities
    map_final: torch.Tensor | None  # (H, W) fused, smoothed
    map_vl: torch.Tensor  # (H, W) vision-language map (pre-suppression)
    map_normal: torch.Tensor
    map_anomaly: torch.Tensor
    map_few: torch.Tensor | None
    boxes: BoundingBoxSet
    bank_sizes: tuple  # surviving (normal, abnormal) prompt counts


def _make_box_provider(cfg: Config):
    kind = cfg.grounding.provider
    if kind == "stub":
        return StubBoxProvider(patch_size=cfg.encoder.patch_size)
    if kind == "file":
        if not cfg.grounding.box_dir:
            raise ConfigurationError("file box provider requires grounding.box_dir")
        return FileBoxProvider(cfg.grounding.box_dir)
    if kind == "none":
        return NullBoxProvider()
    raise ConfigurationError(f"unknown box provider {kind!r}")


class AnomalyDetector:
    """Full zero-/few-shot scoring pipeline behind one object.

    Frozen pieces (both encoders) are rebuilt from the config seed; trainable
    pieces (prompt vectors, interaction kernels, stage aligners, adapter) live
    in ``self.trainable`` and serialize into bundles.
    """

    def __init__(self, cfg: Config, llm_client=None, box_provider=None,
                 dtype: torch.dtype = torch.float32):
        cfg.training.validate()
        self.cfg = cfg
        self.dtype = dtype
        dim = cfg.encoder.embed_dim
        self.vision = ToyVisionEncoder(cfg.encoder, cfg.dataset.image_size,
                                       seed=cfg.seed + _SEED_VISION, dtype=dtype)
        self.text = ToyTextEncoder(cfg.text_encoder, dim,
                                   seed=cfg.seed + _SEED_TEXT, dtype=dtype)
        learner = PromptLearner(cfg.prompts.n_prefix, cfg.text_encoder.width, dim,
                                learn_method=cfg.prompts.learn_method,
                                seed=cfg.seed + _SEED_LEARNER, dtype=dtype)
        adapter = Adapter(dim, max(1, dim // cfg.adapter.bottleneck_ratio),
                          seed=cfg.seed + _SEED_ADAPTER, dtype=dtype)
        kernels = nn.ModuleList(
            DeformableKernel(parse_kernel_shape(spec), dim,
                             deformable=cfg.interaction.deformable, dtype=dtype)
            for spec in cfg.interaction.kernels)
        aligners = nn.ModuleList(
            DeformableKernel([(0, 0)], dim, deformable=False, train_taps=False,
                             dtype=dtype)
            for _ in cfg.encoder.tap_layers)
        self.trainable = nn.ModuleDict({
            "learner": learner, "adapter": adapter,
            "kernels": kernels, "aligners": aligners,
        })
        self.builder = PromptBuilder(self.text, learner, cfg.prompts)
        self.llm_client = llm_client
        self.box_provider = box_provider if box_provider is not None else _make_box_provider(cfg)
        self._vocab_cache = VocabularyCache()
        self._box_cache: dict = {}

    # -- component handles ----------------------------------------------------

    @property
    def learner(self) -> PromptLearner:
        return self.trainable["learner"]

    @property
    def adapter(self) -> Adapter:
        return self.trainable["adapter"]

    @property
    def kernels(self):
        return self.trainable["kernels"]

    @property
    def aligners(self):
        return self.trainable["aligners"]

    def phase1_parameter_groups(self):
        """AdamW groups for the prompt/localization phase."""
        interaction = [p for m in (*self.kernels, *self.aligners)
                       for p in m.parameters() if p.requires_grad]
        return (list(self.learner.parameters()), interaction)

    def phase2_parameters(self):
        return list(self.adapter.parameters())

    # -- per-image pipeline ----------------------------------------------------

    def vocabulary(self, class_name: str):
        return fetch_anomaly_vocabulary(class_name, self.llm_client, self._vocab_cache)

    def detect_boxes(self, image: np.ndarray, class_name: str) -> BoundingBoxSet:
        if not self.cfg.grounding.enabled:
            return BoundingBoxSet(source="disabled")
        queries = list(self.vocabulary(class_name).anomaly_types)
        return detect(image, queries, self.box_provider,
                      self.cfg.grounding.confidence_threshold, self._box_cache)

    def prompt_bank(self, class_name: str, positions, global_feature: torch.Tensor,
                    template_mode: str | None = None):
        vocab = self.vocabulary(class_name)
        bank = self.builder.assemble(class_name, vocab, positions,
                                     template_mode=template_mode,
                                     image_feature=global_feature)
        return bank

    def filter_feature(self, global_feature: torch.Tensor) -> torch.Tensor:
        """Adapter-projected, unit-norm image feature used for prompt filtering
        and explanation."""
        with torch.no_grad():
            return F.normalize(self.adapter(global_feature), dim=-1)

    def stage_maps(self, pyramid: FeaturePyramid, t_n: torch.Tensor, t_a: torch.Tensor):
        """Interaction maps for every stage: deformable kernels on the value-value
        path plus a rigid per-stage aligner on the standard path."""
        target = pyramid.image_size
        scale = self.cfg.interaction.logit_scale
        maps = []
        for stage, aligner in zip(pyramid.stages, self.aligners):
            maps.append(stage_interaction(stage.vv.to(self.dtype), t_n, t_a,
                                          list(self.kernels), target, scale))
            maps.append(stage_interaction(stage.qkv.to(self.dtype), t_n, t_a,
                                          [aligner], target, scale))
        return maps

    def score_image(self, image: np.ndarray | None, class_name: str,
                    pyramid: FeaturePyramid | None = None,
                    memory_bank: MemoryBank | None = None,
                    boxes: BoundingBoxSet | None = None,
                    for_training: bool = False) -> InferenceResult:
        """Run the full pipeline on one image.

        ``for_training`` keeps gradients flowing into the map pair and the
        probability pair and skips suppression/fusion (those are inference-time
        steps); the reported score is then the probability term alone.
        """
        if pyramid is None:
            if image is None:
                raise ConfigurationError("need an image or a precomputed pyramid")
            pyramid = self.vision.encode_image(image)
        g_raw = pyramid.global_feature.to(self.dtype)

        if boxes is None:
            if self.cfg.grounding.enabled and image is not None:
                boxes = self.detect_boxes(image, class_name)
            else:
                boxes = BoundingBoxSet(source="disabled")
        positions = []
        if self.cfg.grounding.enabled and self.cfg.grounding.position_enhancement:
            positions = positions_from_boxes(boxes)

        bank = self.prompt_bank(class_name, positions, g_raw)
        if self.cfg.prompts.filtering:
            bank = prompts_mod.runtime_prompt_filter(self.filter_feature(g_raw), bank)
        t_n, t_a = bank.mean_embeddings()

        m_n, m_a = aggregate_stages(self.stage_maps(pyramid, t_n, t_a))
        m_vl = vl_map(m_n, m_a)

        if for_training:
            _, prob_pair = global_score(g_raw, self.adapter, bank, None,
                                        self.cfg.prompts.temperature)
            return InferenceResult(score=prob_pair[1], prob_pair=prob_pair,
                                   map_final=None, map_vl=m_vl, map_normal=m_n,
                                   map_anomaly=m_a, map_few=None, boxes=boxes,
                                   bank_sizes=(len(bank.normal), len(bank.abnormal)))

        lam = self.cfg.grounding.suppression_lambda
        with torch.no_grad():
            m_vl_sup = suppress(m_vl, boxes, lam)
            m_few = None
            if memory_bank is not None:
                scores = [upsample_bilinear(
                    match_stage(stage.qkv.to(self.dtype), bank_stage),
                    pyramid.image_size)
                    for stage, bank_stage in zip(pyramid.stages, memory_bank.stages)]
                m_few = fewshot_map(scores, boxes, lam)
            m_final = fuse_final(m_vl_sup, m_few, self.cfg.fusion.sigma)
            score, prob_pair = global_score(g_raw, self.adapter, bank, m_final,
                                            self.cfg.prompts.temperature)
        return InferenceResult(score=score, prob_pair=prob_pair, map_final=m_final,
                               map_vl=m_vl, map_normal=m_n, map_anomaly=m_a,
                               map_few=m_few, boxes=boxes,
                               bank_sizes=(len(bank.normal), len(bank.abnormal)))

    def explain_image(self, image: np.ndarray, class_name: str):
        """Ranked (anomaly_class, position, similarity) triples for one image."""
        pyramid = self.vision.encode_image(image)
        g_raw = pyramid.global_feature.to(self.dtype)
        boxes = self.detect_boxes(image, class_name)
        positions = []
        if self.cfg.grounding.enabled and self.cfg.grounding.position_enhancement:
            positions = positions_from_boxes(boxes)
        bank = self.prompt_bank(class_name, positions, g_raw)
        feat = self.filter_feature(g_raw)
        if self.cfg.prompts.filtering:
            bank = prompts_mod.runtime_prompt_filter(feat, bank)
        return prompts_mod.explain(feat, bank)

    def build_memory_bank(self, reference_images, class_name: str) -> MemoryBank:
        pyramids = [self.vision.encode_image(img) for img in reference_images]
        return build_memory(pyramids, class_name)

    # -- bundles ----------------------------------------------------------------

    def save_bundle(self, out_dir: str | Path):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_config(self.cfg, out / "config.yaml")
        tensors = {name: p.detach().cpu().numpy()
                   for name, p in self.trainable.state_dict().items()}
        write_tensors(out / "params.fpk", tensors)

    def load_parameters(self, params_path: str | Path):
        tensors = read_tensors(params_path)
        state = self.trainable.state_dict()
        if set(tensors) != set(state):
            missing = sorted(set(state) - set(tensors))
            extra = sorted(set(tensors) - set(state))
            raise ConfigurationError(
                f"bundle does not match configuration (missing {missing}, extra {extra})")
        loaded = {}
        for name, arr in tensors.items():
            if tuple(arr.shape) != tuple(state[name].shape):
                raise ConfigurationError(
                    f"parameter {name}: bundle shape {arr.shape} != {tuple(state[name].shape)}")
            loaded[name] = torch.from_numpy(arr).to(state[name].dtype)
        self.trainable.load_state_dict(loaded)


def load_bundle(bundle_dir: str | Path, overrides: Config | None = None,
                llm_client=None, box_provider=None) -> AnomalyDetector:
    """Rebuild a detector from ``config.yaml`` + ``params.fpk``.

    ``overrides`` replaces the stored config wholesale (used for eval-time
    ablation flags); it must stay architecture-compatible with the stored
    parameters.
    """
    bundle = Path(bundle_dir)
    cfg = overrides if overrides is not None else load_config(bundle / "config.yaml")
    detector = AnomalyDetector(cfg, llm_client=llm_client, box_provider=box_provider)
    detector.load_parameters(bundle / "params.fpk")
    return detector
