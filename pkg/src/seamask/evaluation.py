"""COCO-style average precision with the remote-sensing modifications:
up to 1000 detections kept per image and area ranges small [10^2, 144^2),
medium [144^2, 512^2), large [512^2, inf) in squared pixels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import DatasetManifest, RleMask, rle_area, rle_decode

DEFAULT_IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))

DEFAULT_AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (10.0**2, 144.0**2),
    "medium": (144.0**2, 512.0**2),
    "large": (512.0**2, float("inf")),
}


@dataclass
class EvalConfig:
    iou_thresholds: tuple = DEFAULT_IOU_THRESHOLDS
    max_dets: int = 1000
    area_ranges: dict = field(default_factory=lambda: dict(DEFAULT_AREA_RANGES))

    def __post_init__(self):
        t = list(self.iou_thresholds)
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("iou_thresholds must be strictly increasing")


@dataclass
class Detection:
    image_id: int
    class_id: int
    score: float
    box: tuple                 # (x, y, w, h)
    mask: RleMask | None = None


@dataclass
class EvalReport:
    box: dict                   # AP / AP50 / AP75 / APs / APm / APl (None = undefined)
    mask: dict
    per_class: dict             # class_id -> {"box": AP, "mask": AP}

    def to_dict(self) -> dict:
        return {"box": self.box, "mask": self.mask, "per_class": self.per_class}


def iou_box(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_mask(a: RleMask, b: RleMask) -> float:
    if a.size != b.size:
        raise ValueError(f"mask size mismatch: {a.size} vs {b.size}")
    ma, mb = rle_decode(a), rle_decode(b)
    inter = np.logical_and(ma, mb).sum()
    union = np.logical_or(ma, mb).sum()
    return float(inter) / float(union) if union > 0 else 0.0


def match(det_ious: np.ndarray, det_areas, gt_areas, threshold: float, area_range) -> tuple:
    """Greedy matching for one image/class at one threshold and area range.

    det_ious: (D, G) IoUs with detections already in descending-score order.
    Returns (tp flags, ignore flags) per detection; gts outside the range are
    ignore-matched (no reward, no penalty).
    """
    lo, hi = area_range
    d, g = det_ious.shape
    gt_ignored = np.array([not (lo <= a < hi) for a in gt_areas], dtype=bool)
    gt_matched = np.zeros(g, dtype=bool)
    tp = np.zeros(d, dtype=bool)
    ignore = np.zeros(d, dtype=bool)

    def best_match(i, candidates) -> int:
        best_j = -1
        best_iou = threshold
        for j in candidates:
            iou = det_ious[i, j]
            if best_j < 0:
                if iou >= threshold:
                    best_j, best_iou = j, iou
            elif iou > best_iou:
                best_j, best_iou = j, iou
        return best_j

    for i in range(d):
        active = [j for j in range(g) if not gt_matched[j] and not gt_ignored[j]]
        j = best_match(i, active)
        if j >= 0:
            gt_matched[j] = True
            tp[i] = True
            continue
        ignorable = [j for j in range(g) if gt_ignored[j] and not gt_matched[j]]
        j = best_match(i, ignorable)
        if j >= 0:
            gt_matched[j] = True
            ignore[i] = True
        elif not (lo <= det_areas[i] < hi):
            ignore[i] = True
    return tp, ignore


def average_precision(scores: np.ndarray, tp: np.ndarray, num_gt: int) -> float | None:
    """101-point interpolated AP; None when no ground truth exists."""
    if num_gt == 0:
        return None
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order].astype(np.float64)
    fp = 1.0 - tp
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # non-increasing precision envelope
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    sample_points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, sample_points, side="left")
    sampled = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(np.mean(sampled))


def sampled_precisions(scores: np.ndarray, tp: np.ndarray, num_gt: int) -> np.ndarray:
    """The 101 interpolated precision values behind average_precision."""
    if scores.size == 0:
        return np.zeros(101)
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / max(num_gt, 1)
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, np.linspace(0.0, 1.0, 101), side="left")
    return np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)


def _truncate_per_image(results: list[Detection], max_dets: int) -> list[Detection]:
    by_image: dict[int, list[Detection]] = {}
    for det in results:
        by_image.setdefault(det.image_id, []).append(det)
    kept = []
    for dets in by_image.values():
        dets = sorted(dets, key=lambda d: -d.score)
        kept.extend(dets[:max_dets])
    return kept


def evaluate(results: list[Detection], manifest: DatasetManifest, cfg: EvalConfig | None = None) -> EvalReport:
    """Class-mean AP over IoU thresholds for boxes and masks, plus area splits."""
    cfg = cfg or EvalConfig()
    class_ids = sorted(c["id"] for c in manifest.categories)
    if any(d.class_id not in set(class_ids) for d in results):
        bad = sorted({d.class_id for d in results} - set(class_ids))
        raise ValueError(f"results contain unknown class ids: {bad}")
    results = _truncate_per_image(results, cfg.max_dets)
    image_ids = [im["id"] for im in manifest.images]
    gt_by_img_cls: dict[tuple, list] = {}
    for ann in manifest.annotations:
        gt_by_img_cls.setdefault((ann["image_id"], ann["category_id"]), []).append(ann)
    det_by_img_cls: dict[tuple, list] = {}
    for det in results:
        det_by_img_cls.setdefault((det.image_id, det.class_id), []).append(det)

    thresholds = list(cfg.iou_thresholds)
    families = ("box", "mask")
    # accumulators[family][(cls, thr_idx, range_name)] -> scores, tp, num_gt
    acc: dict = {f: {} for f in families}
    for f in families:
        for cls in class_ids:
            for ti in range(len(thresholds)):
                for rname in cfg.area_ranges:
                    acc[f][(cls, ti, rname)] = {"scores": [], "tp": [], "num_gt": 0}

    for img in image_ids:
        for cls in class_ids:
            gts = gt_by_img_cls.get((img, cls), [])
            dets = sorted(det_by_img_cls.get((img, cls), []), key=lambda d: -d.score)
            gt_areas = [float(a["area"]) for a in gts]
            for rname, rng in cfg.area_ranges.items():
                lo, hi = rng
                n_active = sum(1 for a in gt_areas if lo <= a < hi)
                for ti in range(len(thresholds)):
                    acc["box"][(cls, ti, rname)]["num_gt"] += n_active
                    acc["mask"][(cls, ti, rname)]["num_gt"] += n_active
            if not dets:
                continue
            gt_boxes = [tuple(a["bbox"]) for a in gts]
            gt_masks = [RleMask(tuple(a["segmentation"]["size"]), list(a["segmentation"]["counts"])) for a in gts]
            ious = {
                "box": np.array([[iou_box(d.box, gb) for gb in gt_boxes] for d in dets]).reshape(len(dets), len(gts)),
                "mask": np.array([[iou_mask(d.mask, gm) for gm in gt_masks] for d in dets]).reshape(len(dets), len(gts)),
            }
            det_areas = {
                "box": [d.box[2] * d.box[3] for d in dets],
                "mask": [rle_area(d.mask) for d in dets],
            }
            scores = np.array([d.score for d in dets])
            for f in families:
                for ti, thr in enumerate(thresholds):
                    for rname, rng in cfg.area_ranges.items():
                        tp, ignore = match(ious[f], det_areas[f], gt_areas, thr, rng)
                        keep = ~ignore
                        a = acc[f][(cls, ti, rname)]
                        a["scores"].append(scores[keep])
                        a["tp"].append(tp[keep])

    def ap_of(f: str, cls: int, ti: int, rname: str) -> float | None:
        a = acc[f][(cls, ti, rname)]
        scores = np.concatenate(a["scores"]) if a["scores"] else np.zeros(0)
        tp = np.concatenate(a["tp"]) if a["tp"] else np.zeros(0, dtype=bool)
        return average_precision(scores, tp, a["num_gt"])

    def mean_over(values) -> float | None:
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    report = {}
    per_class: dict[int, dict] = {cls: {} for cls in class_ids}
    for f in families:
        metrics = {}
        metrics["AP"] = mean_over(
            mean_over(ap_of(f, cls, ti, "all") for ti in range(len(thresholds))) for cls in class_ids
        )
        metrics["AP50"] = mean_over(ap_of(f, cls, thresholds.index(0.5), "all") for cls in class_ids)
        metrics["AP75"] = mean_over(ap_of(f, cls, thresholds.index(0.75), "all") for cls in class_ids)
        for rname, key in (("small", "APs"), ("medium", "APm"), ("large", "APl")):
            metrics[key] = mean_over(
                mean_over(ap_of(f, cls, ti, rname) for ti in range(len(thresholds))) for cls in class_ids
            )
        report[f] = metrics
        for cls in class_ids:
            per_class[cls][f] = mean_over(ap_of(f, cls, ti, "all") for ti in range(len(thresholds)))
    return EvalReport(box=report["box"], mask=report["mask"], per_class=per_class)


def format_report(report: EvalReport, categories: list | None = None) -> str:
    def fmt(v):
        return "   --" if v is None else f"{v:.3f}"

    lines = ["family      AP   AP50   AP75    APs    APm    APl"]
    for fam in ("box", "mask"):
        m = getattr(report, fam)
        lines.append(
            f"{fam:<6} {fmt(m['AP'])}  {fmt(m['AP50'])}  {fmt(m['AP75'])}  {fmt(m['APs'])}  {fmt(m['APm'])}  {fmt(m['APl'])}"
        )
    names = {c["id"]: c["name"] for c in categories or []}
    lines.append("")
    lines.append("class                box AP   mask AP")
    for cls, vals in sorted(report.per_class.items()):
        label = names.get(cls, f"class {cls}")
        lines.append(f"{label:<18} {fmt(vals.get('box')):>8} {fmt(vals.get('mask')):>9}")
    return "\n".join(lines)
