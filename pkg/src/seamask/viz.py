"""Rendering helpers: heatmaps, semantic label colormaps, detection overlays."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .tape import linear_resize_matrix

CLASS_PALETTE = np.array(
    [
        [40, 40, 40],       # background
        [217, 64, 51],
        [51, 140, 217],
        [230, 191, 51],
        [77, 191, 89],
        [166, 77, 217],
        [217, 140, 51],
        [51, 217, 204],
        [153, 153, 230],
    ],
    dtype=np.uint8,
)


def save_png(path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)


def heatmap(values: np.ndarray, out_size: int | None = None) -> np.ndarray:
    """Blue-to-red map of a 2-D array, optionally bilinearly upscaled."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    norm = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    if out_size is not None and v.shape != (out_size, out_size):
        mh = linear_resize_matrix(v.shape[0], out_size)
        mw = linear_resize_matrix(v.shape[1], out_size)
        norm = np.clip(mh @ norm @ mw.T, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4 * norm - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * norm - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * norm - 1), 0, 1)
    return (np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def label_colormap(labels: np.ndarray, out_hw: tuple | None = None) -> np.ndarray:
    """Nearest-upsampled class-color rendering of an integer label map."""
    labels = np.asarray(labels)
    if out_hw is not None and labels.shape != tuple(out_hw):
        oh, ow = out_hw
        rows = np.minimum((np.arange(oh) * labels.shape[0] // oh), labels.shape[0] - 1)
        cols = np.minimum((np.arange(ow) * labels.shape[1] // ow), labels.shape[1] - 1)
        labels = labels[rows[:, None], cols[None, :]]
    return CLASS_PALETTE[labels % len(CLASS_PALETTE)]


def overlay_detections(image: np.ndarray, detections) -> np.ndarray:
    """Tint instance masks with class colors and trace box outlines."""
    canvas = image_to_uint8(image).astype(np.float64)
    h, w = canvas.shape[:2]
    for det in detections:
        color = CLASS_PALETTE[det.class_id % len(CLASS_PALETTE)].astype(np.float64)
        m = det.mask
        canvas[m] = 0.45 * canvas[m] + 0.55 * color
        x, y, bw, bh = det.box
        x0, y0 = int(round(x)), int(round(y))
        x1, y1 = min(int(round(x + bw)), w - 1), min(int(round(y + bh)), h - 1)
        canvas[y0, x0 : x1 + 1] = color
        canvas[y1, x0 : x1 + 1] = color
        canvas[y0 : y1 + 1, x0] = color
        canvas[y0 : y1 + 1, x1] = color
    return np.clip(canvas, 0, 255).astype(np.uint8)
