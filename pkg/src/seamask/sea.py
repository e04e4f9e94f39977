"""Semantic attention over the feature pyramid.

Three steps: rescale all five levels to one uniform scale and average them,
enrich the average with a small supervised segmentation branch whose attention
map multiplies back onto the features, then integrate the enriched map into
every level through additive skip connections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fpn import FeaturePyramid
from .supervision import downsample_labels
from .tape import Tensor, add, concat, conv2d, mul, nll_from_probs, relu, resize_spatial, softmax

FUSION_MODES = ("MULTIPLY", "CONCATE")


@dataclass
class SeaConfig:
    uniform_level: int = 3
    fusion: str = "MULTIPLY"
    enabled: bool = True

    def __post_init__(self):
        if self.uniform_level not in (3, 4, 5, 6):
            raise ValueError("uniform_level must be one of 3..6 (level 2 exceeds the memory budget)")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")


@dataclass
class SeaBranchOutputs:
    intermediate: Tensor   # trunk features at the uniform scale
    attention: Tensor      # multiplicative attention map, pyramid-width channels
    logits: Tensor         # raw per-class scores, C+1 channels
    probabilities: Tensor  # per-pixel softmax over C+1 classes
    enriched: Tensor       # attention applied to the scale-normalized map


@dataclass
class SeaResult:
    pyramid: FeaturePyramid
    loss: Tensor | None
    branch: SeaBranchOutputs | None
    normalized: Tensor | None


def rescale_pyramid(pyramid: FeaturePyramid, uniform_level: int = 3) -> Tensor:
    """Average of all five levels resized to the uniform level's spatial size.

    Bilinear when upsampling, non-overlapping average pooling when
    downsampling, identity at the uniform level; equal 1/5 weights.
    """
    if uniform_level not in (3, 4, 5, 6):
        raise ValueError("uniform_level must be one of 3..6")
    th, tw = pyramid.spatial(uniform_level)
    total = None
    for lvl in (2, 3, 4, 5, 6):
        resized = resize_spatial(pyramid.levels[lvl], th, tw)
        total = resized if total is None else add(total, resized)
    return mul(total, 0.2)


def enrich(pnorm: Tensor, params: dict, num_classes: int, fusion: str = "MULTIPLY") -> SeaBranchOutputs:
    """Segmentation branch: 4x conv3x3 trunk, then attention and prediction streams."""
    x = pnorm
    for k in (1, 2, 3, 4):
        x = relu(conv2d(x, params[f"sea.extract{k}.w"], params[f"sea.extract{k}.b"]))
    attention = conv2d(x, params["sea.attn.w"], params["sea.attn.b"])
    logits = conv2d(x, params["sea.pred.w"], params["sea.pred.b"])
    probabilities = softmax(logits, axis=-1)
    if fusion == "MULTIPLY":
        enriched = mul(pnorm, attention)
    elif fusion == "CONCATE":
        stacked = concat([pnorm, attention], axis=-1)
        enriched = conv2d(stacked, params["sea.reduce.w"], params["sea.reduce.b"])
    else:
        raise ValueError(f"fusion must be one of {FUSION_MODES}")
    return SeaBranchOutputs(x, attention, logits, probabilities, enriched)


def segmentation_loss(probabilities, target) -> Tensor:
    """Mean per-pixel cross-entropy against integer class labels (0 = background)."""
    probs = probabilities if isinstance(probabilities, Tensor) else Tensor(np.asarray(probabilities))
    target = np.asarray(target)
    spatial = probs.shape[-3:-1]
    if target.shape[-2:] != spatial:
        raise ValueError(f"target {target.shape} does not match probability map {spatial}")
    return nll_from_probs(probs, target.reshape(probs.shape[:-1]))


def integrate(pyramid: FeaturePyramid, enriched: Tensor) -> FeaturePyramid:
    """Resize the enriched map to every level and add it (skip connection)."""
    levels = {}
    for lvl in (2, 3, 4, 5, 6):
        h, w = pyramid.spatial(lvl)
        levels[lvl] = add(resize_spatial(enriched, h, w), pyramid.levels[lvl])
    return FeaturePyramid(levels=levels, channels=pyramid.channels)


def sea_forward(
    pyramid: FeaturePyramid,
    target: np.ndarray | None,
    config: SeaConfig,
    params: dict,
    num_classes: int,
) -> SeaResult:
    """rescale -> enrich -> integrate; loss iff a semantic target is given.

    `target` is a full-resolution label map; it is downsampled to the uniform
    scale by nearest-neighbor label sampling.
    """
    if not config.enabled:
        return SeaResult(pyramid, None, None, None)
    pnorm = rescale_pyramid(pyramid, config.uniform_level)
    branch = enrich(pnorm, params, num_classes, config.fusion)
    out = integrate(pyramid, branch.enriched)
    loss = None
    if target is not None:
        th, tw = pyramid.spatial(config.uniform_level)
        small = downsample_labels(np.asarray(target), th, tw)
        loss = segmentation_loss(branch.probabilities, small[None])
    return SeaResult(out, loss, branch, pnorm)
