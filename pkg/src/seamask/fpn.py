"""Tiny convolutional backbone and feature pyramid.

The backbone is a plain 4-stage convnet: a stride-2 stem conv, then per stage
an average-pool downsample followed by two 3x3 convs (ReLU), yielding C2..C5
at strides 4/8/16/32. The pyramid adds 1x1 lateral projections, top-down
nearest-neighbor x2 fusion, a 3x3 smoothing conv per merged level, and P6 as
a stride-2 subsample of P5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Tensor, add, avg_pool2d, conv2d, relu, subsample2, upsample_nearest2

STRIDES = {2: 4, 3: 8, 4: 16, 5: 32, 6: 64}


class DimensionError(ValueError):
    """Image dimensions incompatible with the pyramid's stride ladder."""


@dataclass
class FeaturePyramid:
    """Five dense feature levels P2..P6 sharing one channel width."""

    levels: dict[int, Tensor]
    channels: int
    strides: dict[int, int] = field(default_factory=lambda: dict(STRIDES))

    def __post_init__(self):
        if sorted(self.levels) != [2, 3, 4, 5, 6]:
            raise ValueError(f"pyramid must hold levels 2..6, got {sorted(self.levels)}")
        for i, t in self.levels.items():
            if t.shape[-1] != self.channels:
                raise ValueError(f"level {i} has {t.shape[-1]} channels, expected {self.channels}")
            if not np.all(np.isfinite(t.value)):
                raise ValueError(f"level {i} contains non-finite values")

    def spatial(self, i: int) -> tuple[int, int]:
        return self.levels[i].shape[1], self.levels[i].shape[2]


def check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 64 or w < 64 or h % 64 or w % 64:
        raise DimensionError(f"image sides must be >= 64 and divisible by 64, got {h}x{w}")
    if not np.all(np.isfinite(image)):
        raise DimensionError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise DimensionError("image values must lie in [0, 1]")


def backbone_forward(image, params: dict) -> dict[int, Tensor]:
    """Run the stem + 4 stages; returns {2: C2, ..., 5: C5}."""
    if isinstance(image, np.ndarray):
        check_image(image)
        x = Tensor(image[None])
    else:
        x = image
    x = relu(conv2d(x, params["backbone.stem.w"], params["backbone.stem.b"], stride=2))
    stages: dict[int, Tensor] = {}
    for k in (1, 2, 3, 4):
        x = avg_pool2d(x, 2)
        x = relu(conv2d(x, params[f"backbone.stage{k}.conv1.w"], params[f"backbone.stage{k}.conv1.b"]))
        x = relu(conv2d(x, params[f"backbone.stage{k}.conv2.w"], params[f"backbone.stage{k}.conv2.b"]))
        stages[k + 1] = x
    return stages


def fpn_forward(stages: dict[int, Tensor], params: dict, channels: int) -> FeaturePyramid:
    """Lateral 1x1 + top-down nearest x2 + 3x3 smoothing; P6 subsamples P5."""
    laterals = {
        lvl: conv2d(stages[lvl], params[f"fpn.lateral{lvl}.w"], params[f"fpn.lateral{lvl}.b"])
        for lvl in (2, 3, 4, 5)
    }
    merged = {5: laterals[5]}
    for lvl in (4, 3, 2):
        merged[lvl] = add(laterals[lvl], upsample_nearest2(merged[lvl + 1]))
    levels = {
        lvl: conv2d(merged[lvl], params[f"fpn.smooth{lvl}.w"], params[f"fpn.smooth{lvl}.b"])
        for lvl in (2, 3, 4, 5)
    }
    levels[6] = subsample2(levels[5])
    return FeaturePyramid(levels=levels, channels=channels)


def pyramid_forward(image, params: dict, channels: int) -> FeaturePyramid:
    return fpn_forward(backbone_forward(image, params), params, channels)
