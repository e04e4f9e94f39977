"""Anatomy of the scale-complementary mask head on one RoI.

A shared four-conv trunk feeds three paths at 7/14/28 resolution. Each path
carries a supervised sigmoid guidance map; the active paths are upsampled to
28x28 and concatenated for the per-class fused prediction. The loss is the
sum of the per-path binary cross-entropies plus the fused term, so with every
sigmoid at 0.5 it lands exactly at 4*ln(2).
"""

import math

import numpy as np

from seamask.config import RunConfig
from seamask.model import build_model
from seamask.scmb import (
    fusion_forward,
    guidance_forward,
    scmb_loss,
    trident_forward,
)
from seamask.supervision import InstanceAnnotation, roi_mask_targets
from seamask.tape import Tensor

cfg = RunConfig(
    {
        "backbone.stage_widths": [8, 16, 24, 32],
        "fpn.channels": 24,
        "sea.width": 24,
        "scmb.width": 24,
        "head.hidden": 32,
        "num_classes": 3,
    }
)
model = build_model(cfg)

rng = np.random.default_rng(0)
roi = Tensor(rng.normal(size=(1, 14, 14, 24)))

tf = trident_forward(roi, model.params)
print("trident paths:", tf.f7.shape, tf.f14.shape, tf.f28.shape)

preds = guidance_forward(tf, model.params)
print("guidance maps:", preds.p7.shape, preds.p14.shape, preds.p28.shape)
print(f"  values near 0.5 at init: p14 mean = {preds.p14.value.mean():.4f}")

logits = fusion_forward(tf, model.params, num_classes=3)
print("fused per-class logits:", logits.shape)

# multi-scale targets from a synthetic instance and a proposal box
mask = np.zeros((64, 64), dtype=bool)
mask[12:44, 20:52] = True
inst = InstanceAnnotation(class_id=2, mask=mask)
targets = roi_mask_targets(inst, (16.0, 8.0, 40.0, 40.0))
print("mask supervision coverage: m7 {:.0%}, m14 {:.0%}, m28 {:.0%}".format(
    targets.m7.mean(), targets.m14.mean(), targets.m28.mean()))

loss = scmb_loss(logits, preds, [targets], gt_classes=[2])
print(f"mask-branch loss at init: {loss.item():.5f}  (4*ln2 = {4 * math.log(2):.5f})")

# branch ablations change what is fused, never what is computed
for branches in ((14,), (7, 14), (14, 28), (7, 14, 28)):
    sub_cfg = RunConfig(
        {
            "backbone.stage_widths": [8, 16, 24, 32],
            "fpn.channels": 24,
            "sea.width": 24,
            "scmb.width": 24,
            "head.hidden": 32,
            "num_classes": 3,
            "scmb.branches": list(branches),
        }
    )
    sub_model = build_model(sub_cfg)
    sub_tf = trident_forward(roi, sub_model.params)
    sub_logits = fusion_forward(sub_tf, sub_model.params, num_classes=3, branches=branches)
    print(f"  branches {branches}: fused logits {sub_logits.shape}")
