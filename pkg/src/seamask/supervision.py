"""Ground-truth transforms: semantic label maps, per-RoI multi-scale mask
targets, and detection-head assignment/regression targets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .tape import linear_resize_matrix


@dataclass
class InstanceAnnotation:
    """One labeled object: dense binary mask plus derived box and area."""

    class_id: int
    mask: np.ndarray            # (H, W) binary, image resolution
    bbox: tuple = None          # (x, y, w, h) tight box, derived if omitted
    area: int = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if self.area is None:
            self.area = int(self.mask.sum())
        if self.bbox is None:
            self.bbox = mask_bbox(self.mask)
        if self.class_id < 1:
            raise ValueError("class_id must be >= 1")


@dataclass
class MaskSupervisionSet:
    """Binary mask targets for the 7/14/28 guidance paths and the fused head."""

    m7: np.ndarray
    m14: np.ndarray
    m28: np.ndarray

    def by_size(self, size: int) -> np.ndarray:
        return {7: self.m7, 14: self.m14, 28: self.m28}[size]


@dataclass
class DetectionTargets:
    labels: np.ndarray    # (N,) class id, 0 = background
    deltas: np.ndarray    # (N, 4) box regression targets, zeros for background
    matched: np.ndarray   # (N,) index into gts, -1 for background


def mask_bbox(mask: np.ndarray) -> tuple:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


def instances_to_semantic_map(annotations, height: int, width: int) -> np.ndarray:
    """Per-pixel class map: 0 background, instance pixels get their class id.

    Painting order is canonicalized by decreasing area (content digest breaks
    exact ties), so overlaps resolve smallest-on-top and the result is
    invariant to annotation-list permutation.
    """
    labels = np.zeros((height, width), dtype=np.int32)
    for ann in sorted(
        annotations,
        key=lambda a: (-a.area, a.class_id, hashlib.sha1(np.ascontiguousarray(a.mask).tobytes()).digest()),
    ):
        if ann.mask.shape != (height, width):
            raise ValueError(f"mask shape {ann.mask.shape} does not match image {height}x{width}")
        labels[ann.mask] = ann.class_id
    return labels


def downsample_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor label sampling at half-pixel centers (labels stay integral)."""
    h, w = labels.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), w - 1)
    return labels[rows[:, None], cols[None, :]]


def _pool_threshold(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    pooled = mask.astype(np.float64).reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return (pooled >= 0.5).astype(np.uint8)


def roi_mask_targets(instance: InstanceAnnotation, proposal_box) -> MaskSupervisionSet:
    """Crop + resample the instance mask into 28/14/7 binary targets.

    The mask is cropped to the proposal's pixel window, bilinearly resized to
    28x28, and thresholded at 0.5; each coarser target is a 2x2 average pool
    of the next finer one, thresholded at 0.5.
    """
    x, y, w, h = (float(v) for v in proposal_box)
    if w < 1.0 or h < 1.0:
        raise ValueError(f"degenerate proposal box: w={w}, h={h}")
    mh, mw = instance.mask.shape
    c0 = min(max(int(np.floor(x)), 0), mw - 1)
    r0 = min(max(int(np.floor(y)), 0), mh - 1)
    c1 = min(max(int(np.ceil(x + w)), c0 + 1), mw)
    r1 = min(max(int(np.ceil(y + h)), r0 + 1), mh)
    sub = instance.mask[r0:r1, c0:c1].astype(np.float64)
    rows = linear_resize_matrix(sub.shape[0], 28)
    cols = linear_resize_matrix(sub.shape[1], 28)
    m28 = ((rows @ sub @ cols.T) >= 0.5).astype(np.uint8)
    m14 = _pool_threshold(m28)
    m7 = _pool_threshold(m14)
    return MaskSupervisionSet(m7=m7, m14=m14, m28=m28)


# ---------------------------------------------------------------------------
# detection assignment


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xywh boxes: (N, 4) x (M, 4) -> (N, M)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    ax1, ay1 = a[:, 0], a[:, 1]
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.maximum(0.0, np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :]))
    ih = np.maximum(0.0, np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :]))
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def encode_deltas(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Standard center/size box regression parameterization."""
    p = np.asarray(proposals, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    pcx, pcy = p[:, 0] + p[:, 2] / 2, p[:, 1] + p[:, 3] / 2
    gcx, gcy = g[:, 0] + g[:, 2] / 2, g[:, 1] + g[:, 3] / 2
    return np.stack(
        [
            (gcx - pcx) / p[:, 2],
            (gcy - pcy) / p[:, 3],
            np.log(g[:, 2] / p[:, 2]),
            np.log(g[:, 3] / p[:, 3]),
        ],
        axis=1,
    )


def decode_deltas(boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    cx = b[:, 0] + b[:, 2] / 2 + d[:, 0] * b[:, 2]
    cy = b[:, 1] + b[:, 3] / 2 + d[:, 1] * b[:, 3]
    w = b[:, 2] * np.exp(d[:, 2])
    h = b[:, 3] * np.exp(d[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def detection_targets(proposals: np.ndarray, gts: list, iou_fg: float = 0.5) -> DetectionTargets:
    """Label each proposal with its best-overlapping gt (IoU >= iou_fg) or background."""
    proposals = np.asarray(proposals, dtype=np.float64)
    n = proposals.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    deltas = np.zeros((n, 4), dtype=np.float64)
    matched = np.full(n, -1, dtype=np.int64)
    if not gts or n == 0:
        return DetectionTargets(labels, deltas, matched)
    gt_boxes = np.array([g.bbox for g in gts], dtype=np.float64)
    iou = box_iou_matrix(proposals, gt_boxes)
    best = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best]
    fg = best_iou >= iou_fg
    matched[fg] = best[fg]
    labels[fg] = np.array([gts[j].class_id for j in best[fg]], dtype=np.int64)
    if fg.any():
        deltas[fg] = encode_deltas(proposals[fg], gt_boxes[best[fg]])
    return DetectionTargets(labels, deltas, matched)
