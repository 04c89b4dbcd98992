"""Evaluation protocol: zero-/few-shot scoring of a test split into a report.

For K > 0, the first ``reserve`` normal test samples of each class (stable id
order) are set aside as references and excluded from scoring; the memory bank
enrolls the first K of them. Passing an explicit ``reserve`` keeps the scored
set identical across different K.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetError
from .fewshot import build_memory
from .heatmap import save_heatmap
from .metrics import auroc
from .pipeline import AnomalyDetector


@dataclass
class EvalReport:
    shots: int
    seed: int
    image_auroc: float
    pixel_auroc: float
    per_class: dict
    n_scored: int
    flags: dict = field(default_factory=dict)

    def to_lines(self) -> list:
        lines = [json.dumps({"record": "meta", "shots": self.shots, "seed": self.seed,
                             "n_scored": self.n_scored, "flags": self.flags},
                            sort_keys=True)]
        for name in sorted(self.per_class):
            row = dict(self.per_class[name])
            row.update({"record": "class", "class_name": name})
            lines.append(json.dumps(row, sort_keys=True))
        lines.append(json.dumps({"record": "overall", "image_auroc": self.image_auroc,
                                 "pixel_auroc": self.pixel_auroc}, sort_keys=True))
        return lines

    def write(self, path: str | Path):
        Path(path).write_text("\n".join(self.to_lines()) + "\n")


def run_eval(detector: AnomalyDetector, records, shots: int = 0,
             reserve: int | None = None, heatmap_dir: str | Path | None = None,
             flags: dict | None = None) -> EvalReport:
    """Score the test split and compute image/pixel AUROC per class and overall."""
    if shots < 0:
        raise DatasetError("shots must be >= 0")
    test = sorted((r for r in records if r.split == "test"), key=lambda r: r.sample_id)
    if not test:
        raise DatasetError("no test records")
    reserve = shots if reserve is None else max(reserve, shots)

    classes = sorted({r.class_name for r in test})
    banks = {}
    reserved_ids = set()
    if reserve > 0:
        for name in classes:
            normals = [r for r in test if r.class_name == name and r.label == 0]
            if len(normals) < reserve:
                raise DatasetError(
                    f"class {name!r} has {len(normals)} normal samples; "
                    f"{reserve} references required")
            refs = normals[:reserve]
            reserved_ids.update(r.sample_id for r in refs)
            if shots > 0:
                pyramids = [detector.vision.encode_image(r.image) for r in refs[:shots]]
                banks[name] = build_memory(pyramids, name)

    scored = [r for r in test if r.sample_id not in reserved_ids]
    per_class_scores: dict = {name: {"scores": [], "labels": [], "px": [], "pxl": []}
                              for name in classes}
    if heatmap_dir is not None:
        Path(heatmap_dir).mkdir(parents=True, exist_ok=True)

    with torch.no_grad():
        for rec in scored:
            result = detector.score_image(rec.image, rec.class_name,
                                          memory_bank=banks.get(rec.class_name))
            acc = per_class_scores[rec.class_name]
            acc["scores"].append(float(result.score))
            acc["labels"].append(rec.label)
            acc["px"].append(result.map_final.numpy().ravel())
            acc["pxl"].append(rec.mask.ravel())
            if heatmap_dir is not None:
                save_heatmap(result.map_final,
                             Path(heatmap_dir) / f"{rec.sample_id}.png",
                             image=rec.image)

    per_class = {}
    all_scores, all_labels, all_px, all_pxl = [], [], [], []
    for name, acc in per_class_scores.items():
        if not acc["scores"]:
            continue
        per_class[name] = {
            "image_auroc": auroc(acc["scores"], acc["labels"]),
            "pixel_auroc": auroc(np.concatenate(acc["px"]), np.concatenate(acc["pxl"])),
            "n_images": len(acc["scores"]),
        }
        all_scores += acc["scores"]
        all_labels += acc["labels"]
        all_px += acc["px"]
        all_pxl += acc["pxl"]

    return EvalReport(
        shots=shots, seed=detector.cfg.seed,
        image_auroc=auroc(all_scores, all_labels),
        pixel_auroc=auroc(np.concatenate(all_px), np.concatenate(all_pxl)),
        per_class=per_class, n_scored=len(scored), flags=dict(flags or {}))
