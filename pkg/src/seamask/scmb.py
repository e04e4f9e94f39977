"""Scale-complementary mask head.

A shared tiny FCN feeds three parallel paths at 7/14/28 resolution; each path
carries its own supervised guidance prediction, and the paths in the active
branch set are fused (channel concat by default) into per-class 28x28 mask
logits. With the module disabled the head degenerates to the single-scale
baseline graph (14 -> x2 upsample -> predictor).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .supervision import MaskSupervisionSet
from .tape import (
    Tensor,
    add,
    avg_pool2d,
    bce_from_probs,
    bilinear_resize,
    concat,
    conv2d,
    mul,
    relu,
    select_channel,
    sigmoid,
    squeeze_last,
)

FUSION_MODES = ("MULTIPLY", "CONCATE")


@dataclass
class ScmbConfig:
    branches: tuple = (7, 14, 28)
    fusion: str = "CONCATE"
    enabled: bool = True

    def __post_init__(self):
        branches = tuple(sorted(set(self.branches)))
        if not branches or not set(branches) <= {7, 14, 28} or 14 not in branches:
            raise ValueError("branches must be a nonempty subset of {7,14,28} containing 14")
        self.branches = branches
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")


@dataclass
class TridentFeatures:
    f7: Tensor    # (N, 7, 7, C/2)
    f14: Tensor   # (N, 14, 14, C/2)
    f28: Tensor   # (N, 28, 28, C/2)

    def by_size(self, size: int) -> Tensor:
        return {7: self.f7, 14: self.f14, 28: self.f28}[size]


@dataclass
class GuidancePredictions:
    p7: Tensor    # (N, 7, 7), values in (0, 1)
    p14: Tensor   # (N, 14, 14)
    p28: Tensor   # (N, 28, 28)

    def by_size(self, size: int) -> Tensor:
        return {7: self.p7, 14: self.p14, 28: self.p28}[size]


def _shared_fcn(roi, params: dict) -> Tensor:
    x = roi if isinstance(roi, Tensor) else Tensor(np.asarray(roi))
    if x.ndim == 3:
        x = Tensor(x.value[None])
    if x.shape[1] != 14 or x.shape[2] != 14:
        raise ValueError(f"RoI features must be Nx14x14xC, got {x.shape}")
    for k in (1, 2, 3, 4):
        x = relu(conv2d(x, params[f"mask.fcn{k}.w"], params[f"mask.fcn{k}.b"]))
    return x


def trident_forward(roi, params: dict) -> TridentFeatures:
    """Shared FCN, then per-scale resize + channel-halving 1x1 convs."""
    shared = _shared_fcn(roi, params)
    f7 = conv2d(avg_pool2d(shared, 2), params["mask.shrink7.w"], params["mask.shrink7.b"])
    f14 = conv2d(shared, params["mask.shrink14.w"], params["mask.shrink14.b"])
    f28 = conv2d(bilinear_resize(shared, 28, 28), params["mask.shrink28.w"], params["mask.shrink28.b"])
    return TridentFeatures(f7=f7, f14=f14, f28=f28)


def guidance_forward(tf: TridentFeatures, params: dict) -> GuidancePredictions:
    """Per-path sigmoid(1x1 conv), one class-agnostic map per scale."""
    preds = {}
    for s in (7, 14, 28):
        logit = conv2d(tf.by_size(s), params[f"mask.gp{s}.w"], params[f"mask.gp{s}.b"])
        preds[s] = sigmoid(squeeze_last(logit))
    return GuidancePredictions(p7=preds[7], p14=preds[14], p28=preds[28])


def _stack_targets(targets: list[MaskSupervisionSet], size: int, dtype) -> np.ndarray:
    return np.stack([t.by_size(size) for t in targets]).astype(dtype)


def scg_loss(preds: GuidancePredictions, targets: list[MaskSupervisionSet], branches=(7, 14, 28)) -> Tensor:
    """Sum over active paths of the spatial-mean binary cross-entropy."""
    total = None
    for s in sorted(branches):
        pred = preds.by_size(s)
        stacked = _stack_targets(targets, s, pred.dtype)
        if stacked.shape != pred.shape:
            raise ValueError(f"guidance target shape {stacked.shape} != prediction {pred.shape}")
        term = bce_from_probs(pred, stacked)
        total = term if total is None else add(total, term)
    return total


def fusion_forward(
    tf: TridentFeatures,
    params: dict,
    num_classes: int,
    fusion: str = "CONCATE",
    branches=(7, 14, 28),
) -> Tensor:
    """Merge active paths at 28x28 and predict per-class mask logits (N,28,28,C)."""
    resized = {
        7: bilinear_resize(tf.f7, 28, 28),
        14: bilinear_resize(tf.f14, 28, 28),
        28: tf.f28,
    }
    active = [resized[s] for s in sorted(branches)]
    if fusion == "CONCATE":
        fused = active[0] if len(active) == 1 else concat(active, axis=-1)
    elif fusion == "MULTIPLY":
        fused = active[0]
        for t in active[1:]:
            fused = mul(fused, t)
    else:
        raise ValueError(f"fusion must be one of {FUSION_MODES}")
    x = fused
    for k in (1, 2, 3, 4):
        x = relu(conv2d(x, params[f"mask.fusion{k}.w"], params[f"mask.fusion{k}.b"]))
    return conv2d(x, params["mask.pred.w"], params["mask.pred.b"])


def fused_mask_loss(fusion_logits: Tensor, targets: list[MaskSupervisionSet], gt_classes) -> Tensor:
    """Mean BCE on the ground-truth class channel of the fused 28x28 logits."""
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    num_classes = fusion_logits.shape[-1]
    if gt_classes.min() < 1 or gt_classes.max() > num_classes:
        raise ValueError(f"class ids must lie in 1..{num_classes}")
    probs = sigmoid(select_channel(fusion_logits, gt_classes - 1))
    stacked = _stack_targets(targets, 28, probs.dtype)
    return bce_from_probs(probs, stacked)


def scmb_loss(
    fusion_logits: Tensor,
    guidance_preds: GuidancePredictions,
    targets: list[MaskSupervisionSet],
    gt_classes,
    branches=(7, 14, 28),
) -> Tensor:
    """Guidance sum plus fused-prediction term."""
    return add(scg_loss(guidance_preds, targets, branches), fused_mask_loss(fusion_logits, targets, gt_classes))


def baseline_mask_head(roi, params: dict, num_classes: int) -> Tensor:
    """Single-scale head: FCN -> 1x1 halve -> bilinear x2 -> trunk -> per-class logits."""
    shared = _shared_fcn(roi, params)
    f14 = conv2d(shared, params["mask.shrink14.w"], params["mask.shrink14.b"])
    x = bilinear_resize(f14, 28, 28)
    for k in (1, 2, 3, 4):
        x = relu(conv2d(x, params[f"mask.fusion{k}.w"], params[f"mask.fusion{k}.b"]))
    return conv2d(x, params["mask.pred.w"], params["mask.pred.b"])


@dataclass
class MaskHeadOutputs:
    logits: Tensor                         # (N, 28, 28, C)
    guidance: GuidancePredictions | None   # None when the module is disabled
    trident: TridentFeatures | None


def mask_head_forward(roi, params: dict, num_classes: int, cfg: ScmbConfig) -> MaskHeadOutputs:
    if not cfg.enabled:
        return MaskHeadOutputs(baseline_mask_head(roi, params, num_classes), None, None)
    tf = trident_forward(roi, params)
    preds = guidance_forward(tf, params)
    logits = fusion_forward(tf, params, num_classes, cfg.fusion, cfg.branches)
    return MaskHeadOutputs(logits, preds, tf)


def mask_head_loss(out: MaskHeadOutputs, targets: list[MaskSupervisionSet], gt_classes, cfg: ScmbConfig) -> Tensor:
    if not cfg.enabled:
        return fused_mask_loss(out.logits, targets, gt_classes)
    return scmb_loss(out.logits, out.guidance, targets, gt_classes, cfg.branches)
