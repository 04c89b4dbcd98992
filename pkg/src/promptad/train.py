"""Two-phase optimization: prompts + localization first, then the adapter.

Phase 1 trains the prompt context vectors (plus meta-network) and the
interaction kernels/aligners with the global cross-entropy plus the pixel
losses. Phase 2 freezes those and trains the adapter with the global loss
alone. Everything is seeded, batch size is one sample, and the optimizer is
AdamW with per-group learning rates.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from pathlib import Path

import numpy as np
import torch

from . import prompts as prompts_mod
from .adapter import global_score
from .config import Config
from .errors import DatasetError, TrainingDivergedError
from .grounding import positions_from_boxes
from .losses import loss_global, loss_local
from .metrics import auroc
from .pipeline import AnomalyDetector

log = logging.getLogger(__name__)


def holdout_split(records, fraction: float, seed: int):
    """Seed-stable split by sample-id hash; returns (train, holdout)."""
    train, held = [], []
    for rec in records:
        digest = hashlib.sha256(f"{seed}:{rec.sample_id}".encode()).digest()
        u = int.from_bytes(digest[:8], "big") / 2 ** 64
        (held if u < fraction else train).append(rec)
    return train, held


def _epoch_order(n: int, seed: int, epoch: int):
    order = list(range(n))
    random.Random(seed * 100_003 + epoch).shuffle(order)
    return order


def _check_finite(value: torch.Tensor, what: str, epoch: int, step: int):
    if not torch.isfinite(value):
        raise TrainingDivergedError(
            f"{what} became non-finite at epoch {epoch} step {step}: {float(value)}")


def _holdout_metrics(detector: AnomalyDetector, held, pyramids, boxes):
    if not held:
        return None, None
    scores, labels = [], []
    pixel_scores, pixel_labels = [], []
    with torch.no_grad():
        for rec in held:
            result = detector.score_image(rec.image, rec.class_name,
                                          pyramid=pyramids[rec.sample_id],
                                          boxes=boxes.get(rec.sample_id))
            scores.append(float(result.score))
            labels.append(rec.label)
            pixel_scores.append(result.map_final.numpy().ravel())
            pixel_labels.append(rec.mask.ravel())
    try:
        img_auc = auroc(scores, labels)
        px_auc = auroc(np.concatenate(pixel_scores), np.concatenate(pixel_labels))
    except Exception:
        return None, None
    return img_auc, px_auc


def gradient_reach_check(detector: AnomalyDetector, record) -> dict:
    """One forward/backward on one sample; returns grad max-abs per phase-1 tensor."""
    prompt_params, interaction_params = detector.phase1_parameter_groups()
    names = {id(p): n for n, p in detector.trainable.named_parameters()}
    for p in prompt_params + interaction_params:
        p.grad = None
    result = detector.score_image(record.image, record.class_name, for_training=True)
    mask = torch.from_numpy(record.mask)
    loss = loss_global(result.prob_pair, record.label) + \
        loss_local(result.map_normal, result.map_anomaly, mask,
                   detector.cfg.training.focal_gamma)
    loss.backward()
    out = {}
    for p in prompt_params + interaction_params:
        grad = 0.0 if p.grad is None else float(p.grad.abs().max())
        out[names[id(p)]] = grad
    for p in prompt_params + interaction_params:
        p.grad = None
    return out


def train(records, cfg: Config, llm_client=None, detector: AnomalyDetector | None = None,
          log_path: str | Path | None = None):
    """Run both phases on the train split of ``records``.

    Returns (detector, metric_log). Zero-epoch phases are proper no-ops.
    """
    cfg.training.validate()
    records = [r for r in records if r.split == "train"]
    if not records:
        raise DatasetError("no training records")
    tc = cfg.training
    torch.manual_seed(tc.seed)
    if detector is None:
        detector = AnomalyDetector(cfg, llm_client=llm_client)

    train_recs, held = holdout_split(records, tc.holdout_fraction, tc.seed)
    if not train_recs:
        train_recs, held = records, []

    # frozen-encoder features never change; cache them once
    pyramids = {r.sample_id: detector.vision.encode_image(r.image)
                for r in records}
    boxes = {}
    if cfg.grounding.enabled:
        boxes = {r.sample_id: detector.detect_boxes(r.image, r.class_name)
                 for r in records}

    metric_log = []

    # -- phase 1: prompts + interaction ---------------------------------------
    prompt_params, interaction_params = detector.phase1_parameter_groups()
    for p in detector.phase2_parameters():
        p.requires_grad_(False)
    if tc.epochs_phase1 > 0:
        opt = torch.optim.AdamW(
            [{"params": prompt_params, "lr": tc.lr_prompts},
             {"params": interaction_params, "lr": tc.lr_interaction}],
            weight_decay=tc.weight_decay)
        for epoch in range(tc.epochs_phase1):
            sum_g, sum_l = 0.0, 0.0
            for step, idx in enumerate(_epoch_order(len(train_recs), tc.seed, epoch)):
                rec = train_recs[idx]
                result = detector.score_image(
                    rec.image, rec.class_name, pyramid=pyramids[rec.sample_id],
                    boxes=boxes.get(rec.sample_id), for_training=True)
                l_g = loss_global(result.prob_pair, rec.label)
                l_l = loss_local(result.map_normal, result.map_anomaly,
                                 torch.from_numpy(rec.mask), tc.focal_gamma)
                loss = l_g + l_l
                _check_finite(loss, "phase-1 loss", epoch, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sum_g += float(l_g)
                sum_l += float(l_l)
            img_auc, px_auc = _holdout_metrics(detector, held, pyramids, boxes)
            metric_log.append({
                "phase": 1, "epoch": epoch,
                "loss_global": sum_g / len(train_recs),
                "loss_local": sum_l / len(train_recs),
                "holdout_image_auroc": img_auc, "holdout_pixel_auroc": px_auc,
            })
            log.info("phase 1 epoch %d: %s", epoch, metric_log[-1])

    # -- phase 2: adapter -------------------------------------------------------
    for p in prompt_params + interaction_params:
        p.requires_grad_(False)
    for p in detector.phase2_parameters():
        p.requires_grad_(True)
    if tc.epochs_phase2 > 0:
        opt = torch.optim.AdamW(detector.phase2_parameters(), lr=tc.lr_adapter,
                                weight_decay=tc.weight_decay)
        # prompt embeddings are frozen now; cache per-sample banks and features
        cached = {}
        with torch.no_grad():
            for rec in train_recs:
                pyr = pyramids[rec.sample_id]
                positions = []
                if cfg.grounding.enabled and cfg.grounding.position_enhancement:
                    positions = positions_from_boxes(boxes[rec.sample_id])
                g_raw = pyr.global_feature.to(detector.dtype)
                bank = detector.prompt_bank(rec.class_name, positions, g_raw)
                cached[rec.sample_id] = (g_raw, bank)
        for epoch in range(tc.epochs_phase2):
            sum_g = 0.0
            for step, idx in enumerate(_epoch_order(len(train_recs), tc.seed + 7919, epoch)):
                rec = train_recs[idx]
                g_raw, bank = cached[rec.sample_id]
                if cfg.prompts.filtering:
                    bank_f = prompts_mod.runtime_prompt_filter(
                        detector.filter_feature(g_raw), bank)
                else:
                    bank_f = bank
                _, prob = global_score(g_raw, detector.adapter, bank_f, None,
                                       cfg.prompts.temperature)
                l_g = loss_global(prob, rec.label)
                _check_finite(l_g, "phase-2 loss", epoch, step)
                opt.zero_grad()
                l_g.backward()
                opt.step()
                sum_g += float(l_g)
            img_auc, px_auc = _holdout_metrics(detector, held, pyramids, boxes)
            metric_log.append({
                "phase": 2, "epoch": epoch,
                "loss_global": sum_g / len(train_recs), "loss_local": None,
                "holdout_image_auroc": img_auc, "holdout_pixel_auroc": px_auc,
            })
            log.info("phase 2 epoch %d: %s", epoch, metric_log[-1])

    for p in prompt_params + interaction_params:
        p.requires_grad_(True)
    for p in detector.phase2_parameters():
        p.requires_grad_(True)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for entry in metric_log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return detector, metric_log
