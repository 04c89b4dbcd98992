"""Synthetic defect dataset: textured objects on contrasting backgrounds with
exact defect masks.

Each category renders a procedural object (shape + texture + palette) that
covers a bit under half of the frame so the contrast-based box stub sees it
as foreground. Defects are drawn fully on the object and the mask records
exactly the pixels the defect touched. Defect appearance is shared across
categories so models trained on some categories transfer to held-out ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import DatasetConfig
from .errors import DatasetError, InputError

DEFECT_MENU = ("scratch", "blob", "hole", "stain")


@dataclass
class SampleRecord:
    sample_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int  # 0 normal, 1 abnormal
    mask: np.ndarray  # (H, W) bool
    class_name: str
    split: str  # "train" | "test"
    defect_types: list = field(default_factory=list)

    def __post_init__(self):
        if (self.label == 1) != bool(self.mask.any()):
            raise InputError("label must be 1 iff the mask has positives")
        if (self.label == 1) != bool(self.defect_types):
            raise InputError("defect_types must be non-empty iff abnormal")


# -- procedural textures ------------------------------------------------------

def _stripes(h, w, rng, color_a, color_b, period, horizontal=True):
    idx = np.arange(h)[:, None] if horizontal else np.arange(w)[None, :]
    phase = rng.uniform(0, period)
    t = 0.5 + 0.5 * np.sin(2 * np.pi * (idx + phase) / period)
    t = np.broadcast_to(t, (h, w))[..., None]
    return color_a * t + color_b * (1 - t)


def _checker(h, w, rng, color_a, color_b, cell):
    oy, ox = rng.integers(0, cell, size=2)
    yy, xx = np.meshgrid(np.arange(h) + oy, np.arange(w) + ox, indexing="ij")
    t = (((yy // cell) + (xx // cell)) % 2).astype(np.float64)[..., None]
    return color_a * t + color_b * (1 - t)


def _rings(h, w, rng, color_a, color_b, period):
    cy, cx = h / 2 + rng.uniform(-1, 1), w / 2 + rng.uniform(-1, 1)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    r = np.hypot(yy - cy, xx - cx)
    t = (0.5 + 0.5 * np.sin(2 * np.pi * r / period))[..., None]
    return color_a * t + color_b * (1 - t)


def _dots(h, w, rng, color_a, color_b, cell):
    oy, ox = rng.integers(0, cell, size=2)
    yy, xx = np.meshgrid(np.arange(h) + oy, np.arange(w) + ox, indexing="ij")
    inside = (np.hypot(yy % cell - cell / 2, xx % cell - cell / 2) < cell * 0.3)
    return np.where(inside[..., None], color_a, color_b)


# -- object shapes (boolean masks) --------------------------------------------

def _disk_shape(h, w, cy, cx, radius):
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.hypot(yy - cy, xx - cx) <= radius


def _rect_shape(h, w, cy, cx, half_h, half_w):
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return (np.abs(yy - cy) <= half_h) & (np.abs(xx - cx) <= half_w)


def _annulus_shape(h, w, cy, cx, radius, inner):
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    r = np.hypot(yy - cy, xx - cx)
    return (r <= radius) & (r > inner)


_CATEGORY_STYLES = {
    # name: (shape, texture, object colors, background color)
    "plate": ("rect", "stripes_h", ([0.55, 0.62, 0.72], [0.72, 0.78, 0.86]), [0.12, 0.10, 0.10]),
    "band": ("band", "stripes_v", ([0.76, 0.62, 0.38], [0.60, 0.45, 0.25]), [0.10, 0.13, 0.16]),
    "panel": ("rect", "checker", ([0.42, 0.62, 0.44], [0.58, 0.76, 0.58]), [0.14, 0.09, 0.13]),
    "block": ("rect", "dots", ([0.58, 0.50, 0.70], [0.74, 0.68, 0.84]), [0.09, 0.12, 0.09]),
    "disc": ("disk", "rings", ([0.78, 0.55, 0.36], [0.62, 0.40, 0.24]), [0.10, 0.10, 0.14]),
    "washer": ("annulus", "stripes_h", ([0.70, 0.72, 0.74], [0.52, 0.54, 0.58]), [0.12, 0.12, 0.08]),
}


def _render_base(class_name: str, size: int, rng: np.random.Generator):
    """Return (image, object_mask) for a normal sample of the category."""
    if class_name not in _CATEGORY_STYLES:
        raise DatasetError(f"unknown category {class_name!r}")
    shape_kind, texture, (col_a, col_b), bg = _CATEGORY_STYLES[class_name]
    col_a = np.asarray(col_a) * rng.uniform(0.93, 1.07)
    col_b = np.asarray(col_b) * rng.uniform(0.93, 1.07)
    bg = np.asarray(bg) * rng.uniform(0.9, 1.1)

    cy = size / 2 + rng.uniform(-2, 2)
    cx = size / 2 + rng.uniform(-2, 2)
    scale = rng.uniform(0.95, 1.05)
    if shape_kind == "disk":
        obj = _disk_shape(size, size, cy, cx, 0.37 * size * scale)
    elif shape_kind == "annulus":
        obj = _annulus_shape(size, size, cy, cx, 0.38 * size * scale, 0.13 * size * scale)
    elif shape_kind == "band":
        half_h = 0.22 * size * scale
        obj = _rect_shape(size, size, cy, size / 2, half_h, size / 2)
    else:
        obj = _rect_shape(size, size, cy, cx, 0.34 * size * scale, 0.34 * size * scale)

    if texture == "stripes_h":
        tex = _stripes(size, size, rng, col_a, col_b, period=rng.uniform(6, 9))
    elif texture == "stripes_v":
        tex = _stripes(size, size, rng, col_a, col_b, period=rng.uniform(6, 9),
                       horizontal=False)
    elif texture == "checker":
        tex = _checker(size, size, rng, col_a, col_b, cell=int(rng.integers(5, 8)))
    elif texture == "dots":
        tex = _dots(size, size, rng, col_a, col_b, cell=int(rng.integers(6, 9)))
    else:
        tex = _rings(size, size, rng, col_a, col_b, period=rng.uniform(6, 10))

    image = np.where(obj[..., None], tex, bg[None, None, :])
    image = image + rng.normal(0.0, 0.01, size=image.shape)
    return np.clip(image, 0.0, 1.0), obj


# -- defect rasterizers --------------------------------------------------------

def _stamp_disk(mask, cy, cx, radius):
    h, w = mask.shape
    y0, y1 = max(0, int(cy - radius - 1)), min(h, int(cy + radius + 2))
    x0, x1 = max(0, int(cx - radius - 1)), min(w, int(cx + radius + 2))
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
    mask[y0:y1, x0:x1] |= np.hypot(yy - cy, xx - cx) <= radius


def _polyline_mask(shape, points, width):
    mask = np.zeros(shape, dtype=bool)
    radius = width / 2.0
    for (y0, x0), (y1, x1) in zip(points[:-1], points[1:]):
        steps = max(2, int(np.hypot(y1 - y0, x1 - x0) * 2))
        for t in np.linspace(0.0, 1.0, steps):
            _stamp_disk(mask, y0 + t * (y1 - y0), x0 + t * (x1 - x0), radius)
    return mask


def _ellipse_mask(shape, cy, cx, ry, rx, angle):
    yy, xx = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    ca, sa = np.cos(angle), np.sin(angle)
    u = (yy - cy) * ca + (xx - cx) * sa
    v = -(yy - cy) * sa + (xx - cx) * ca
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _interior_point(obj_mask, rng, margin=4):
    """Pick a point whose ``margin``-neighborhood lies inside the object."""
    interior = ndimage.binary_erosion(obj_mask, iterations=margin)
    ys, xs = np.nonzero(interior)
    if len(ys) == 0:
        ys, xs = np.nonzero(obj_mask)
    idx = rng.integers(0, len(ys))
    return float(ys[idx]), float(xs[idx])


_SCRATCH_SHADES = ([0.08, 0.08, 0.09], [0.92, 0.92, 0.95])
_BLOB_SHADES = ([0.55, 0.16, 0.12], [0.35, 0.12, 0.20], [0.16, 0.12, 0.10])
_STAIN_SHADES = ([0.22, 0.16, 0.08], [0.10, 0.14, 0.10])


def _inject_defect(image, obj_mask, kind, rng, background_color):
    # defects live on the object; supports are clipped to it so positives
    # always contrast with their surroundings
    h, w = obj_mask.shape
    if kind == "scratch":
        y, x = _interior_point(obj_mask, rng, margin=3)
        points = [(y, x)]
        angle = rng.uniform(0, 2 * np.pi)
        for _ in range(rng.integers(1, 4)):
            length = rng.uniform(8, 16)
            angle += rng.uniform(-0.7, 0.7)
            y = float(np.clip(y + np.sin(angle) * length, 1, h - 2))
            x = float(np.clip(x + np.cos(angle) * length, 1, w - 2))
            points.append((y, x))
        mask = _polyline_mask((h, w), points, width=rng.uniform(1.5, 3.0)) & obj_mask
        color = np.asarray(_SCRATCH_SHADES[rng.integers(0, len(_SCRATCH_SHADES))])
        image[mask] = color * rng.uniform(0.9, 1.1)
    elif kind == "blob":
        y, x = _interior_point(obj_mask, rng, margin=5)
        mask = _ellipse_mask((h, w), y, x, rng.uniform(2.5, 6.0), rng.uniform(2.5, 6.0),
                             rng.uniform(0, np.pi)) & obj_mask
        color = np.asarray(_BLOB_SHADES[rng.integers(0, len(_BLOB_SHADES))])
        image[mask] = color * rng.uniform(0.9, 1.1)
    elif kind == "hole":
        y, x = _interior_point(obj_mask, rng, margin=6)
        mask = np.zeros((h, w), dtype=bool)
        _stamp_disk(mask, y, x, rng.uniform(2.0, 5.0))
        mask &= obj_mask
        image[mask] = background_color
    elif kind == "stain":
        y, x = _interior_point(obj_mask, rng, margin=7)
        mask = _ellipse_mask((h, w), y, x, rng.uniform(5.0, 9.0), rng.uniform(5.0, 9.0),
                             rng.uniform(0, np.pi)) & obj_mask
        alpha = rng.uniform(0.3, 0.5)
        tint = np.asarray(_STAIN_SHADES[rng.integers(0, len(_STAIN_SHADES))])
        image[mask] = (1 - alpha) * image[mask] + alpha * tint
    else:
        raise DatasetError(f"unknown defect kind {kind!r}")
    return mask


def _make_sample(class_name, split, label, sample_id, size, defect_menu,
                 rng) -> SampleRecord:
    image, obj_mask = _render_base(class_name, size, rng)
    mask = np.zeros((size, size), dtype=bool)
    defects = []
    if label == 1:
        _, _, _, bg = _CATEGORY_STYLES[class_name]
        bg_color = np.median(image[~obj_mask].reshape(-1, 3), axis=0) if (~obj_mask).any() \
            else np.asarray(bg)
        n_defects = int(rng.integers(1, 3))
        kinds = list(rng.choice(defect_menu, size=n_defects, replace=False)) \
            if n_defects <= len(defect_menu) else list(defect_menu)
        for kind in kinds:
            mask |= _inject_defect(image, obj_mask, str(kind), rng, bg_color)
            defects.append(str(kind))
        if not mask.any():  # degenerate draw; force a visible blob
            mask |= _inject_defect(image, obj_mask, "blob", rng, bg_color)
            defects.append("blob")
        defects = sorted(set(defects))
        image = np.clip(image, 0.0, 1.0)
    return SampleRecord(sample_id=sample_id, image=image.astype(np.float32),
                        label=label, mask=mask, class_name=class_name, split=split,
                        defect_types=defects)


def generate_dataset(cfg: DatasetConfig, seed: int = 0) -> list:
    """Deterministically render all samples described by ``cfg``."""
    for count in (cfg.normal_per_category, cfg.abnormal_per_category):
        if count < 1:
            raise DatasetError("per-category counts must be >= 1")
    records = []
    root = np.random.SeedSequence(seed)
    specs = [("train", c) for c in cfg.train_categories] + \
            [("test", c) for c in cfg.test_categories]
    for (split, category), seq in zip(specs, root.spawn(len(specs))):
        child = seq.spawn(cfg.normal_per_category + cfg.abnormal_per_category)
        for i in range(cfg.normal_per_category):
            rng = np.random.Generator(np.random.PCG64(child[i]))
            records.append(_make_sample(
                category, split, 0, f"{category}_{split}_good_{i:03d}",
                cfg.image_size, cfg.defect_types, rng))
        for i in range(cfg.abnormal_per_category):
            rng = np.random.Generator(np.random.PCG64(child[cfg.normal_per_category + i]))
            records.append(_make_sample(
                category, split, 1, f"{category}_{split}_bad_{i:03d}",
                cfg.image_size, cfg.defect_types, rng))
    return records


# -- disk round trip -----------------------------------------------------------

def save_dataset(records, out_dir: str | Path):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    index = []
    for rec in records:
        img_rel = f"images/{rec.sample_id}.png"
        Image.fromarray((rec.image * 255).round().astype(np.uint8)).save(out / img_rel)
        mask_rel = None
        if rec.label == 1:
            mask_rel = f"masks/{rec.sample_id}.png"
            Image.fromarray(rec.mask.astype(np.uint8) * 255).save(out / mask_rel)
        index.append({"id": rec.sample_id, "image": img_rel, "mask": mask_rel,
                      "label": rec.label, "class_name": rec.class_name,
                      "split": rec.split, "defect_types": rec.defect_types})
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))


def load_dataset(root: str | Path) -> list:
    root = Path(root)
    index_path = root / "index.json"
    if not index_path.exists():
        raise DatasetError(f"no dataset index at {index_path}")
    records = []
    for entry in json.loads(index_path.read_text()):
        image = np.asarray(Image.open(root / entry["image"]), dtype=np.float32) / 255.0
        if entry["mask"]:
            mask = np.asarray(Image.open(root / entry["mask"])) > 127
        else:
            mask = np.zeros(image.shape[:2], dtype=bool)
        records.append(SampleRecord(
            sample_id=entry["id"], image=image, label=int(entry["label"]), mask=mask,
            class_name=entry["class_name"], split=entry["split"],
            defect_types=list(entry["defect_types"])))
    return records
