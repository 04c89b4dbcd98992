"""Heatmap PNG emission with a fixed jet-style colormap."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _jet_lut() -> np.ndarray:
    x = np.linspace(0.0, 1.0, 256)
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return (np.stack([r, g, b], axis=1) * 255).round().astype(np.uint8)


_LUT = _jet_lut()


def colorize(anomaly_map: np.ndarray) -> np.ndarray:
    """Map [0, 1] scores to RGB uint8 via the fixed colormap."""
    idx = np.clip((np.asarray(anomaly_map, dtype=np.float64) * 255).round(), 0, 255)
    return _LUT[idx.astype(np.intp)]


def save_heatmap(anomaly_map, path: str | Path, image: np.ndarray | None = None,
                 alpha: float = 0.6):
    """Write the colorized map, optionally blended over the source image."""
    if hasattr(anomaly_map, "numpy"):
        anomaly_map = anomaly_map.detach().cpu().numpy()
    rgb = colorize(anomaly_map).astype(np.float64) / 255.0
    if image is not None:
        rgb = alpha * rgb + (1 - alpha) * np.asarray(image, dtype=np.float64)
    Image.fromarray((rgb * 255).round().astype(np.uint8)).save(path)
