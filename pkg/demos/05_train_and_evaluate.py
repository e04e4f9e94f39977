"""Train the full pipeline on a handful of images and score it.

A miniature run: four 128x128 scenes, jittered ground-truth proposals, a few
hundred SGD steps, then inference and the modified COCO protocol (up to 1000
detections kept per image; small/medium/large area splits at 10^2/144^2/512^2
squared pixels). Expect high AP50 on the training images themselves; this is
an overfit demonstration, not a generalization claim.
"""

import os
import time

import numpy as np

from seamask.config import RunConfig
from seamask.dataio import SynthConfig, rle_encode, synth_generate
from seamask.detector import SgdState, TrainSample, infer, train_step
from seamask.evaluation import Detection, evaluate, format_report
from seamask.model import build_model
from seamask.viz import overlay_detections, save_png

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

cfg = RunConfig(
    {
        "backbone.stage_widths": [8, 16, 24, 32],
        "fpn.channels": 24,
        "sea.width": 24,
        "scmb.width": 24,
        "head.hidden": 64,
        "num_classes": 3,
        "train.lr": 0.003,
        "proposals.replicas": 3,
        "proposals.background": 4,
        "seed": 0,
    }
)
synth = SynthConfig(num_images=4, image_size=128, scale_range=(0.15, 0.7),
                    clutter=4, texture=0.15, seed=0)
manifest, images = synth_generate(synth)
samples = {im["id"]: TrainSample(images[im["id"]], manifest.instances_for(im["id"]))
           for im in manifest.images}
ids = sorted(samples)

model = build_model(cfg)
state = SgdState(model.params)
steps = 240
t0 = time.time()
order = []
for step in range(steps):
    if not order:
        order = list(np.random.default_rng([0, 7, step]).permutation(ids))
    report = train_step([samples[order.pop()]], model, state, cfg["train.lr"],
                        np.random.default_rng([0, step]))
    if (step + 1) % 60 == 0:
        print(f"step {step + 1:>3}: detection {report.l_detection:.3f}  "
              f"segmentation {report.l_segmentation:.3f}  mask {report.l_scmb:.3f}  "
              f"total {report.l_total:.3f}")
print(f"trained {steps} steps in {time.time() - t0:.0f}s")

results = []
for iid in ids:
    dets = infer(samples[iid].image, model, gts=samples[iid].annotations,
                 rng=np.random.default_rng([0, iid]))
    results.extend(Detection(iid, d.class_id, d.score, d.box, rle_encode(d.mask)) for d in dets)
    if iid == ids[0]:
        save_png(os.path.join(OUT, "trained_detections.png"),
                 overlay_detections(samples[iid].image, dets))

report = evaluate(results, manifest)
print()
print(format_report(report, manifest.categories))
print(f"\nwrote {OUT}/trained_detections.png")
