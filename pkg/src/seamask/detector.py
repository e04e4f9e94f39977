"""Two-stage assembly: proposals, RoI-Align, detection head, attention and
mask modules, joint loss, SGD training, and inference with NMS + mask pasting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fpn import FeaturePyramid, pyramid_forward
from .model import Model
from .scmb import ScmbConfig, mask_head_forward, mask_head_loss
from .sea import SeaConfig, sea_forward
from .supervision import (
    DetectionTargets,
    InstanceAnnotation,
    box_iou_matrix,
    decode_deltas,
    detection_targets,
    encode_deltas,
    instances_to_semantic_map,
    roi_mask_targets,
)
from .tape import (
    Tensor,
    add,
    affine,
    bce_elementwise,
    concat,
    conv2d,
    gather_rows,
    linear_resize_matrix,
    mul,
    nll_from_probs,
    relu,
    reshape,
    roi_align,
    select_index_axis1,
    sigmoid,
    smooth_l1,
    softmax,
    squeeze_last,
    tsum,
    zero_grads,
)


class TrainDivergedError(RuntimeError):
    """Raised when the joint loss goes non-finite; carries the last report."""

    def __init__(self, report):
        super().__init__(f"non-finite training loss: {report}")
        self.report = report


@dataclass
class Proposal:
    box: tuple          # (x, y, w, h) in image pixels
    score: float
    source: str         # GT_JITTER or RPN_LITE


@dataclass
class DetectionResult:
    box: tuple
    class_id: int
    score: float
    mask: np.ndarray    # (H, W) bool, zero outside the box


@dataclass
class JointLossReport:
    l_detection: float
    l_segmentation: float
    l_scmb: float
    l_total: float
    weights: tuple = (1.0, 1.0, 1.0)


def joint_loss(l_detection: float, l_segmentation: float, l_scmb: float, alphas=(1.0, 1.0, 1.0)) -> JointLossReport:
    """Weighted sum of the three branch losses (unit weights by default)."""
    parts = (l_detection, l_segmentation, l_scmb)
    if not all(np.isfinite(parts)):
        raise ValueError(f"non-finite loss component: {parts}")
    a1, a2, a3 = alphas
    total = a1 * l_detection + a2 * l_segmentation + a3 * l_scmb
    return JointLossReport(float(l_detection), float(l_segmentation), float(l_scmb), float(total), tuple(alphas))


# ---------------------------------------------------------------------------
# boxes and proposals


def clip_box(box, height: int, width: int) -> tuple:
    x, y, w, h = (float(v) for v in box)
    x0 = min(max(x, 0.0), width - 1.0)
    y0 = min(max(y, 0.0), height - 1.0)
    x1 = min(max(x + w, x0 + 1.0), float(width))
    y1 = min(max(y + h, y0 + 1.0), float(height))
    return (x0, y0, x1 - x0, y1 - y0)


def assign_level(box) -> int:
    """FPN level for one box: k = clamp(floor(4 + log2(sqrt(wh)/224)), 2, 5)."""
    _, _, w, h = box
    k = int(np.floor(4 + np.log2(max(np.sqrt(w * h), 1e-6) / 224.0)))
    return min(max(k, 2), 5)


def propose(
    image_shape,
    gts: list[InstanceAnnotation] | None = None,
    pyramid: FeaturePyramid | None = None,
    params: dict | None = None,
    mode: str = "GT_JITTER",
    replicas: int = 4,
    background: int = 8,
    jitter_center: float = 0.1,
    jitter_size: float = 0.1,
    rpn_topk: int = 64,
    rng: np.random.Generator | None = None,
) -> list[Proposal]:
    """Candidate boxes: jittered ground truth at desk scale, or the light RPN."""
    rng = rng or np.random.default_rng(0)
    h, w = image_shape[:2]
    if mode == "GT_JITTER":
        if gts is None:
            raise ValueError("GT_JITTER proposals require ground-truth annotations")
        out = []
        for g in gts:
            gx, gy, gw, gh = g.bbox
            for _ in range(replicas):
                dx, dy = rng.uniform(-jitter_center, jitter_center, 2)
                sw, sh = 1.0 + rng.uniform(-jitter_size, jitter_size, 2)
                nw, nh = gw * sw, gh * sh
                cx = gx + gw / 2 + dx * gw
                cy = gy + gh / 2 + dy * gh
                out.append(Proposal(clip_box((cx - nw / 2, cy - nh / 2, nw, nh), h, w), 1.0, "GT_JITTER"))
        for _ in range(background):
            bw = rng.uniform(0.05, 0.4) * w
            bh = rng.uniform(0.05, 0.4) * h
            bx = rng.uniform(0, w - bw)
            by = rng.uniform(0, h - bh)
            out.append(Proposal(clip_box((bx, by, bw, bh), h, w), 0.0, "GT_JITTER"))
        return out
    if mode == "RPN_LITE":
        if pyramid is None or params is None:
            raise ValueError("RPN_LITE proposals require a pyramid and parameters")
        scored = rpn_forward(pyramid, params)
        boxes, scores = [], []
        for lvl, (obj, deltas, anchors) in scored.items():
            p = 1.0 / (1.0 + np.exp(-obj.value.reshape(-1)))
            dec = decode_deltas(anchors, deltas.value.reshape(-1, 4))
            boxes.append(dec)
            scores.append(p)
        boxes = np.concatenate(boxes)
        scores = np.concatenate(scores)
        boxes = np.array([clip_box(b, h, w) for b in boxes])
        keep = nms(boxes, scores, np.zeros(len(boxes), dtype=int), iou_threshold=0.7)
        keep = keep[:rpn_topk]
        return [Proposal(tuple(boxes[i]), float(scores[i]), "RPN_LITE") for i in keep]
    raise ValueError(f"unknown proposal mode: {mode}")


def proposal_boxes(proposals: list[Proposal]) -> np.ndarray:
    return np.array([p.box for p in proposals], dtype=np.float64).reshape(-1, 4)


def rpn_anchors(pyramid: FeaturePyramid, level: int) -> np.ndarray:
    """One square anchor per cell, side 4x the level stride."""
    stride = pyramid.strides[level]
    hh, ww = pyramid.spatial(level)
    side = 4.0 * stride
    ys = (np.arange(hh) + 0.5) * stride
    xs = (np.arange(ww) + 0.5) * stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([cx.ravel() - side / 2, cy.ravel() - side / 2,
                     np.full(hh * ww, side), np.full(hh * ww, side)], axis=1)


def rpn_forward(pyramid: FeaturePyramid, params: dict) -> dict:
    """Objectness + box deltas over P3..P5 (one anchor per cell)."""
    out = {}
    for lvl in (3, 4, 5):
        x = relu(conv2d(pyramid.levels[lvl], params["rpn.conv.w"], params["rpn.conv.b"]))
        obj = squeeze_last(conv2d(x, params["rpn.obj.w"], params["rpn.obj.b"]))
        deltas = conv2d(x, params["rpn.box.w"], params["rpn.box.b"])
        out[lvl] = (obj, deltas, rpn_anchors(pyramid, lvl))
    return out


def rpn_loss(scored: dict, gts: list[InstanceAnnotation]) -> Tensor:
    """Objectness BCE (positives: IoU >= 0.5 or per-gt best; negatives: IoU < 0.3)
    plus smooth-L1 on positive-anchor deltas."""
    gt_boxes = np.array([g.bbox for g in gts], dtype=np.float64).reshape(-1, 4)
    total = None
    for lvl, (obj, deltas, anchors) in scored.items():
        flat_obj = reshape(obj, (-1,))
        flat_del = reshape(deltas, (-1, 4))
        if len(gts) == 0:
            labels = np.zeros(anchors.shape[0])
            weight = np.ones(anchors.shape[0])
            pos = np.zeros(anchors.shape[0], dtype=bool)
        else:
            iou = box_iou_matrix(anchors, gt_boxes)
            best_gt = iou.argmax(axis=1)
            best_iou = iou[np.arange(len(anchors)), best_gt]
            pos = best_iou >= 0.5
            for j in range(len(gts)):
                pos[iou[:, j].argmax()] = True
            neg = (best_iou < 0.3) & ~pos
            weight = (pos | neg).astype(np.float64)
            labels = pos.astype(np.float64)
        probs = sigmoid(flat_obj)
        n_used = max(weight.sum(), 1.0)
        term = mul(tsum(mul(bce_elementwise(probs, labels), weight)), 1.0 / n_used)
        if pos.any():
            tgt = encode_deltas(anchors[pos], gt_boxes[best_gt[pos]])
            reg = mul(tsum(smooth_l1(gather_rows(flat_del, np.nonzero(pos)[0]), tgt)), 1.0 / max(pos.sum(), 1))
            term = add(term, reg)
        total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------------------
# RoI feature extraction and heads


def extract_roi_features(pyramid: FeaturePyramid, boxes: np.ndarray, out_size: int = 14, sampling: int = 2) -> Tensor:
    """RoI-Align each box from its assigned level; rows keep the input order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    levels = np.array([assign_level(b) for b in boxes])
    pieces, orders = [], []
    for lvl in (2, 3, 4, 5):
        idx = np.nonzero(levels == lvl)[0]
        if idx.size == 0:
            continue
        pieces.append(roi_align(pyramid.levels[lvl], boxes[idx], stride=pyramid.strides[lvl],
                                out_size=out_size, sampling=sampling))
        orders.append(idx)
    if len(pieces) == 1:
        stacked, order = pieces[0], orders[0]
    else:
        stacked = concat(pieces, axis=0)
        order = np.concatenate(orders)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return gather_rows(stacked, inverse)


def detection_head(roi_feats: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """Two hidden affine layers, then class scores and per-class box deltas."""
    n = roi_feats.shape[0]
    x = reshape(roi_feats, (n, -1))
    x = relu(affine(x, params["head.fc1.w"], params["head.fc1.b"]))
    x = relu(affine(x, params["head.fc2.w"], params["head.fc2.b"]))
    cls_logits = affine(x, params["head.cls.w"], params["head.cls.b"])
    box_deltas = affine(x, params["head.box.w"], params["head.box.b"])
    num_classes_p1 = cls_logits.shape[1]
    return cls_logits, reshape(box_deltas, (n, num_classes_p1, 4))


def detection_loss(cls_logits: Tensor, box_deltas: Tensor, targets: DetectionTargets) -> Tensor:
    """Softmax cross-entropy plus smooth-L1 on foreground deltas, averaged
    over the sampled proposals."""
    n = cls_logits.shape[0]
    if targets.labels.shape[0] != n:
        raise ValueError(f"targets for {targets.labels.shape[0]} proposals, head ran on {n}")
    cls_term = nll_from_probs(softmax(cls_logits, axis=-1), targets.labels)
    fg = np.nonzero(targets.labels > 0)[0]
    if fg.size == 0:
        return cls_term
    per_class = select_index_axis1(box_deltas, targets.labels)
    fg_deltas = gather_rows(per_class, fg)
    reg = mul(tsum(smooth_l1(fg_deltas, targets.deltas[fg])), 1.0 / n)
    return add(cls_term, reg)


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy class-wise suppression of boxes with IoU > threshold; returns
    kept indices in descending-score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for i in order:
        suppressed = False
        for j in kept:
            if classes[i] == classes[j] and box_iou_matrix(boxes[i : i + 1], boxes[j : j + 1])[0, 0] > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(int(i))
    return np.array(kept, dtype=np.intp)


def paste_mask(prob28: np.ndarray, box, height: int, width: int, threshold: float = 0.5) -> np.ndarray:
    """Bilinearly resize the 28x28 probability map into the box, threshold at
    0.5; pixels outside the box stay zero."""
    x, y, w, h = clip_box(box, height, width)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = int(min(np.ceil(x + w), width)), int(min(np.ceil(y + h), height))
    bw, bh = max(x1 - x0, 1), max(y1 - y0, 1)
    mh = linear_resize_matrix(28, bh)
    mw = linear_resize_matrix(28, bw)
    resized = mh @ prob28 @ mw.T
    out = np.zeros((height, width), dtype=bool)
    out[y0 : y0 + bh, x0 : x0 + bw] = resized >= threshold
    return out


# ---------------------------------------------------------------------------
# forward orchestration


def _model_cfgs(model: Model) -> tuple[SeaConfig, ScmbConfig]:
    c = model.config
    sea_cfg = SeaConfig(
        uniform_level=c["sea.uniform_level"], fusion=c["sea.fusion"], enabled=c["sea.enabled"]
    )
    scmb_cfg = ScmbConfig(
        branches=tuple(c["scmb.branches"]), fusion=c["scmb.fusion"], enabled=c["scmb.enabled"]
    )
    return sea_cfg, scmb_cfg


def infer(
    image: np.ndarray,
    model: Model,
    gts: list[InstanceAnnotation] | None = None,
    rng: np.random.Generator | None = None,
) -> list[DetectionResult]:
    """Full inference: pyramid -> attention -> proposals -> heads -> NMS ->
    top max_dets -> per-survivor mask prediction and pasting."""
    c = model.config
    sea_cfg, scmb_cfg = _model_cfgs(model)
    h, w = image.shape[:2]
    image = image.astype(model.dtype, copy=False)
    pyramid = pyramid_forward(image, model.params, c["fpn.channels"])
    res = sea_forward(pyramid, None, sea_cfg, model.params, model.num_classes)
    pyramid = res.pyramid
    props = propose(
        image.shape,
        gts=gts,
        pyramid=pyramid,
        params=model.params,
        mode=c["proposals.mode"],
        replicas=c["proposals.replicas"],
        background=c["proposals.background"],
        jitter_center=c["proposals.jitter_center"],
        jitter_size=c["proposals.jitter_size"],
        rpn_topk=c["proposals.rpn_topk"],
        rng=rng or np.random.default_rng(c["seed"]),
    )
    if not props:
        return []
    boxes = proposal_boxes(props)
    feats = extract_roi_features(pyramid, boxes)
    cls_logits, box_deltas = detection_head(feats, model.params)
    probs = softmax(cls_logits, axis=-1).value
    deltas = box_deltas.value

    floor = c["infer.score_floor"]
    cand_boxes, cand_scores, cand_classes = [], [], []
    for i in range(len(props)):
        for cls in range(1, model.num_classes + 1):
            score = probs[i, cls]
            if score < floor:
                continue
            refined = decode_deltas(boxes[i : i + 1], deltas[i : i + 1, cls, :])[0]
            cand_boxes.append(clip_box(refined, h, w))
            cand_scores.append(float(score))
            cand_classes.append(cls)
    if not cand_boxes:
        return []
    cand_boxes = np.array(cand_boxes)
    cand_scores = np.array(cand_scores)
    cand_classes = np.array(cand_classes)
    keep = nms(cand_boxes, cand_scores, cand_classes, c["infer.nms"])
    keep = keep[: c["infer.max_dets"]]

    final_boxes = cand_boxes[keep]
    mask_feats = extract_roi_features(pyramid, final_boxes)
    head_out = mask_head_forward(mask_feats, model.params, model.num_classes, scmb_cfg)
    logits = head_out.logits.value
    results = []
    for row, i in enumerate(keep):
        cls = int(cand_classes[i])
        prob = 1.0 / (1.0 + np.exp(-logits[row, :, :, cls - 1]))
        mask = paste_mask(prob, final_boxes[row], h, w, c["infer.mask_threshold"])
        results.append(DetectionResult(tuple(final_boxes[row]), cls, float(cand_scores[i]), mask))
    return results


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainSample:
    image: np.ndarray
    annotations: list[InstanceAnnotation]


class SgdState:
    """Momentum buffers, one per parameter."""

    def __init__(self, params: dict):
        self.velocity = {k: np.zeros_like(t.value) for k, t in params.items()}

    def as_arrays(self) -> dict:
        return dict(self.velocity)


def sgd_update(params: dict, state: SgdState, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """v = mu*v + g; w -= lr*v + lr*wd*w (decay decoupled from momentum)."""
    for k, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.value)
        v = state.velocity[k]
        v *= momentum
        v += g
        t.value = t.value - lr * v - lr * weight_decay * t.value


def _sample_rois(targets: DetectionTargets, cap: int, fg_fraction: float, rng: np.random.Generator) -> np.ndarray:
    fg = np.nonzero(targets.labels > 0)[0]
    bg = np.nonzero(targets.labels == 0)[0]
    n_fg = min(len(fg), int(round(cap * fg_fraction)))
    if len(fg) > n_fg:
        fg = rng.choice(fg, size=n_fg, replace=False)
    n_bg = min(len(bg), cap - len(fg))
    if len(bg) > n_bg:
        bg = rng.choice(bg, size=n_bg, replace=False)
    idx = np.concatenate([fg, bg]).astype(np.intp)
    return np.sort(idx)


def forward_losses(sample: TrainSample, model: Model, rng: np.random.Generator) -> dict:
    """One image's forward pass; returns the three loss tensors plus floats."""
    c = model.config
    sea_cfg, scmb_cfg = _model_cfgs(model)
    image = sample.image.astype(model.dtype, copy=False)
    h, w = image.shape[:2]
    gts = sample.annotations

    pyramid = pyramid_forward(image, model.params, c["fpn.channels"])
    semantic = instances_to_semantic_map(gts, h, w) if sea_cfg.enabled else None
    res = sea_forward(pyramid, semantic, sea_cfg, model.params, model.num_classes)
    pyramid = res.pyramid
    l_seg = res.loss if res.loss is not None else Tensor(np.zeros((), dtype=model.dtype))

    props = propose(
        image.shape,
        gts=gts,
        pyramid=pyramid,
        params=model.params,
        mode=c["proposals.mode"],
        replicas=c["proposals.replicas"],
        background=c["proposals.background"],
        jitter_center=c["proposals.jitter_center"],
        jitter_size=c["proposals.jitter_size"],
        rpn_topk=c["proposals.rpn_topk"],
        rng=rng,
    )
    boxes = proposal_boxes(props)
    targets = detection_targets(boxes, gts)
    idx = _sample_rois(targets, c["train.sample_rois"], c["train.fg_fraction"], rng)
    boxes = boxes[idx]
    targets = DetectionTargets(targets.labels[idx], targets.deltas[idx], targets.matched[idx])

    if boxes.shape[0]:
        feats = extract_roi_features(pyramid, boxes)
        cls_logits, box_deltas = detection_head(feats, model.params)
        l_det = detection_loss(cls_logits, box_deltas, targets)
    else:
        feats = None
        l_det = Tensor(np.zeros((), dtype=model.dtype))
    if c["proposals.mode"] == "RPN_LITE":
        l_det = add(l_det, rpn_loss(rpn_forward(pyramid, model.params), gts))

    pos = np.nonzero(targets.labels > 0)[0]
    if pos.size:
        mask_targets = [roi_mask_targets(gts[targets.matched[i]], boxes[i]) for i in pos]
        gt_classes = targets.labels[pos]
        pos_feats = gather_rows(feats, pos)
        head_out = mask_head_forward(pos_feats, model.params, model.num_classes, scmb_cfg)
        l_scmb = mask_head_loss(head_out, mask_targets, gt_classes, scmb_cfg)
    else:
        l_scmb = Tensor(np.zeros((), dtype=model.dtype))
    return {"l_detection": l_det, "l_segmentation": l_seg, "l_scmb": l_scmb}


def train_step(
    batch: list[TrainSample],
    model: Model,
    state: SgdState,
    lr: float,
    step_rng: np.random.Generator,
    alphas=(1.0, 1.0, 1.0),
) -> JointLossReport:
    """Forward all samples, weighted-sum the three branch losses, backprop, update."""
    c = model.config
    try:
        per = [forward_losses(s, model, step_rng) for s in batch]
    except ValueError as err:
        if "non-finite" in str(err):
            raise TrainDivergedError(
                JointLossReport(float("nan"), float("nan"), float("nan"), float("nan"), tuple(alphas))
            ) from err
        raise
    n = len(per)
    mean_parts = {}
    for key in ("l_detection", "l_segmentation", "l_scmb"):
        total = per[0][key]
        for d in per[1:]:
            total = add(total, d[key])
        mean_parts[key] = mul(total, 1.0 / n)
    total = add(
        add(mul(mean_parts["l_detection"], alphas[0]), mul(mean_parts["l_segmentation"], alphas[1])),
        mul(mean_parts["l_scmb"], alphas[2]),
    )
    parts = (
        mean_parts["l_detection"].item(),
        mean_parts["l_segmentation"].item(),
        mean_parts["l_scmb"].item(),
    )
    if not all(np.isfinite(parts)):
        raise TrainDivergedError(JointLossReport(*parts, total.item(), tuple(alphas)))
    report = joint_loss(*parts, alphas)
    zero_grads(model.params)
    total.backward()
    sgd_update(model.params, state, lr, c["train.momentum"], c["train.weight_decay"])
    return report


def learning_rate(base_lr: float, schedule: str, step: int, total_steps: int) -> float:
    """Constant, or x0.1 drops at 8/12 and 11/12 of the step budget."""
    if schedule == "constant":
        return base_lr
    if schedule == "step_decay":
        frac = step / max(total_steps, 1)
        if frac >= 11 / 12:
            return base_lr * 0.01
        if frac >= 8 / 12:
            return base_lr * 0.1
        return base_lr
    raise ValueError(f"unknown schedule: {schedule}")
