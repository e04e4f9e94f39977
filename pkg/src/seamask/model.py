"""Parameter construction for every enabled submodule.

Parameters live in one flat dict of leaf tensors keyed by dotted names, so the
optimizer, checkpoints, and gradient checks can treat the model uniformly.
Trunk layers use He-normal init; final prediction layers use std-0.01 normal.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .tape import Tensor


def _he_conv(rng, shape, dtype):
    kh, kw, cin, _ = shape
    std = np.sqrt(2.0 / (kh * kw * cin))
    return rng.normal(0.0, std, size=shape).astype(dtype)


def _pred_conv(rng, shape, dtype, std=0.01):
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Model:
    """Bundles the resolved config with the flat parameter dict."""

    def __init__(self, config: RunConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.num_classes = config["num_classes"]
        self.dtype = np.dtype(config["dtype"])

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, t in self.params.items():
            if arrays[k].shape != t.value.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {t.value.shape}")
            t.value = arrays[k].astype(t.value.dtype, copy=True)


def build_model(config: RunConfig, seed: int | None = None) -> Model:
    rng = np.random.default_rng(config["seed"] if seed is None else seed)
    dtype = np.dtype(config["dtype"])
    ch = config["fpn.channels"]
    widths = config["backbone.stage_widths"]
    num_classes = config["num_classes"]
    p: dict[str, Tensor] = {}

    def conv(name, shape, init=_he_conv, **kw):
        p[f"{name}.w"] = Tensor(init(rng, shape, dtype, **kw))
        p[f"{name}.b"] = Tensor(np.zeros(shape[-1], dtype=dtype))

    def dense(name, din, dout, std=None):
        if std is None:
            w = rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout)).astype(dtype)
        else:
            w = rng.normal(0.0, std, size=(din, dout)).astype(dtype)
        p[f"{name}.w"] = Tensor(w)
        p[f"{name}.b"] = Tensor(np.zeros(dout, dtype=dtype))

    # backbone: stride-2 stem, then four stages of (pool/2 + two 3x3 convs)
    conv("backbone.stem", (3, 3, 3, widths[0]))
    prev = widths[0]
    for k, w in enumerate(widths, start=1):
        conv(f"backbone.stage{k}.conv1", (3, 3, prev, w))
        conv(f"backbone.stage{k}.conv2", (3, 3, w, w))
        prev = w

    # FPN laterals + smoothing
    for lvl, w in zip((2, 3, 4, 5), widths):
        conv(f"fpn.lateral{lvl}", (1, 1, w, ch))
        conv(f"fpn.smooth{lvl}", (3, 3, ch, ch))

    if config["sea.enabled"]:
        sw = config["sea.width"]
        conv("sea.extract1", (3, 3, ch, sw))
        for k in (2, 3, 4):
            conv(f"sea.extract{k}", (3, 3, sw, sw))
        conv("sea.attn", (1, 1, sw, ch), init=_pred_conv)
        conv("sea.pred", (1, 1, sw, num_classes + 1), init=_pred_conv)
        if config["sea.fusion"] == "CONCATE":
            conv("sea.reduce", (1, 1, 2 * ch, ch))

    mw = config["scmb.width"]
    if mw % 2:
        raise ValueError("scmb.width must be even (trident paths halve channels)")
    half = mw // 2
    conv("mask.fcn1", (3, 3, ch, mw))
    for k in (2, 3, 4):
        conv(f"mask.fcn{k}", (3, 3, mw, mw))
    if config["scmb.enabled"]:
        branches = config["scmb.branches"]
        for s in (7, 14, 28):
            conv(f"mask.shrink{s}", (1, 1, mw, half))
            conv(f"mask.gp{s}", (1, 1, half, 1), init=_pred_conv)
        fusion_in = len(branches) * half if config["scmb.fusion"] == "CONCATE" else half
    else:
        conv("mask.shrink14", (1, 1, mw, half))
        fusion_in = half
    conv("mask.fusion1", (3, 3, fusion_in, mw))
    for k in (2, 3, 4):
        conv(f"mask.fusion{k}", (3, 3, mw, mw))
    conv("mask.pred", (1, 1, mw, num_classes), init=_pred_conv)

    hidden = config["head.hidden"]
    dense("head.fc1", 14 * 14 * ch, hidden)
    dense("head.fc2", hidden, hidden)
    dense("head.cls", hidden, num_classes + 1, std=0.01)
    dense("head.box", hidden, (num_classes + 1) * 4, std=0.01)

    if config["proposals.mode"] == "RPN_LITE":
        conv("rpn.conv", (3, 3, ch, ch))
        conv("rpn.obj", (1, 1, ch, 1), init=_pred_conv)
        conv("rpn.box", (1, 1, ch, 4), init=_pred_conv)

    return Model(config, p)
