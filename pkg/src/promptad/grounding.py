"""Initial anomaly localization: box providers, nine-region names, suppression.

Providers implement ``detect(image, queries) -> list of ((x0, y0, x1, y1),
confidence)`` in normalized coordinates, plus a ``name`` attribute. The
bundled heuristic stub flags patches whose mean color deviates from the
image-wide median patch color, so its boxes land on foreground objects. A
file provider reads sidecar JSON keyed by the image's content hash, which
lets real detector outputs be replayed offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

log = logging.getLogger(__name__)

POSITION_NAMES = (
    "top-left", "top", "top-right",
    "left", "center", "right",
    "bottom-left", "bottom", "bottom-right",
)


@dataclass
class BoundingBoxSet:
    boxes: list = field(default_factory=list)  # [(x0, y0, x1, y1)] normalized
    confidences: list = field(default_factory=list)
    source: str = "heuristic-stub"

    def __post_init__(self):
        if len(self.boxes) != len(self.confidences):
            raise ValueError("boxes and confidences must align")
        for x0, y0, x1, y1 in self.boxes:
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"degenerate box ({x0}, {y0}, {x1}, {y1})")

    def __len__(self):
        return len(self.boxes)


def image_content_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()[:24]


class StubBoxProvider:
    """Contrast-based foreground boxes for desk-scale runs.

    Patches whose mean color deviates from the image-wide median patch color
    by more than ``min_contrast`` are grouped into connected components; each
    component yields one box.
    """

    name = "heuristic-stub"

    def __init__(self, patch_size: int = 8, min_contrast: float = 0.06):
        self.patch_size = patch_size
        self.min_contrast = min_contrast

    def detect(self, image: np.ndarray, queries) -> list:
        h, w = image.shape[:2]
        p = self.patch_size
        gh, gw = h // p, w // p
        patch_mean = image[: gh * p, : gw * p].reshape(gh, p, gw, p, 3).mean(axis=(1, 3))
        median = np.median(patch_mean.reshape(-1, 3), axis=0)
        dev = np.linalg.norm(patch_mean - median, axis=-1)
        mask = dev > self.min_contrast
        if not mask.any():
            return []
        labels, n = ndimage.label(mask)
        out = []
        for idx in range(1, n + 1):
            ys, xs = np.nonzero(labels == idx)
            box = (xs.min() * p / w, ys.min() * p / h,
                   (xs.max() + 1) * p / w, (ys.max() + 1) * p / h)
            conf = float(min(1.0, dev[labels == idx].mean() * 2.0))
            out.append((box, conf))
        return out


class FileBoxProvider:
    """Replays detections from ``<root>/<content-hash>.json`` sidecar files."""

    name = "file"

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def sidecar_path(self, image: np.ndarray) -> Path:
        return self.root / f"{image_content_hash(image)}.json"

    def detect(self, image: np.ndarray, queries) -> list:
        path = self.sidecar_path(image)
        if not path.exists():
            return []
        entries = json.loads(path.read_text())
        return [(tuple(e["bbox"]), float(e["confidence"])) for e in entries]

    @staticmethod
    def write_sidecar(root: str | Path, image: np.ndarray, detections: list):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        payload = [{"bbox": list(box), "confidence": conf} for box, conf in detections]
        path = root / f"{image_content_hash(image)}.json"
        path.write_text(json.dumps(payload, sort_keys=True))
        return path


class NullBoxProvider:
    name = "none"

    def detect(self, image, queries):
        return []


def detect(image: np.ndarray, queries: list, provider,
           confidence_threshold: float = 0.25, cache: dict | None = None) -> BoundingBoxSet:
    """Run a provider, keep boxes above threshold; failures degrade to an empty set."""
    if not queries:
        raise ValueError("queries must be non-empty")
    key = None
    if cache is not None:
        key = (image_content_hash(image), tuple(sorted(queries)))
        if key in cache:
            return cache[key]
    try:
        raw = provider.detect(image, queries)
    except Exception as exc:
        log.warning("box provider %r failed (%s); continuing without suppression",
                    getattr(provider, "name", "?"), exc)
        raw = []
    boxes, confs = [], []
    for box, conf in raw:
        if conf >= confidence_threshold:
            boxes.append(tuple(float(v) for v in box))
            confs.append(float(conf))
    result = BoundingBoxSet(boxes=boxes, confidences=confs,
                            source=getattr(provider, "name", "unknown"))
    if cache is not None:
        cache[key] = result
    return result


def positions_from_boxes(boxes: BoundingBoxSet) -> list:
    """Nine-region names voted by box centers, in canonical grid order."""
    hit = set()
    for x0, y0, x1, y1 in boxes.boxes:
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        col = min(2, int(cx * 3))
        row = min(2, int(cy * 3))
        hit.add(row * 3 + col)
    return [POSITION_NAMES[i] for i in sorted(hit)]


def box_mask(boxes: BoundingBoxSet, height: int, width: int) -> np.ndarray:
    """Boolean (H, W) union of boxes; partially covered pixels count as inside."""
    mask = np.zeros((height, width), dtype=bool)
    for x0, y0, x1, y1 in boxes.boxes:
        c0, c1 = int(np.floor(x0 * width)), int(np.ceil(x1 * width))
        r0, r1 = int(np.floor(y0 * height)), int(np.ceil(y1 * height))
        mask[max(r0, 0): max(r1, 0), max(c0, 0): max(c1, 0)] = True
    return mask


def suppress(anomaly_map: torch.Tensor, boxes: BoundingBoxSet,
             suppression_lambda: float) -> torch.Tensor:
    """Scale scores outside the box union by lambda; empty box set is a no-op."""
    if not 0.0 <= suppression_lambda <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if len(boxes) == 0:
        return anomaly_map
    h, w = anomaly_map.shape
    inside = torch.from_numpy(box_mask(boxes, h, w))
    scale = torch.where(inside, anomaly_map.new_ones(()),
                        anomaly_map.new_full((), suppression_lambda))
    return anomaly_map * scale
