"""Backbone + pyramid: stride arithmetic, zero propagation, determinism, and
the analytic-vs-finite-difference gradient law."""

import numpy as np
import numpy.testing as npt
import pytest

from seamask.config import RunConfig
from seamask.fpn import DimensionError, backbone_forward, check_image, fpn_forward, pyramid_forward
from seamask.gradcheck import check_gradients
from seamask.model import build_model
from seamask.tape import add, tsum

TINY = {
    "backbone.stage_widths": [2, 3, 4, 5],
    "fpn.channels": 4,
    "sea.width": 4,
    "scmb.width": 4,
    "head.hidden": 8,
    "num_classes": 2,
}


def tiny_model(seed=0, **over):
    cfg = RunConfig({**TINY, **over})
    return build_model(cfg, seed=seed)


def test_backbone_stage_shapes_64():
    m = tiny_model()
    stages = backbone_forward(np.zeros((64, 64, 3)), m.params)
    sizes = {lvl: stages[lvl].shape[1:3] for lvl in stages}
    assert sizes == {2: (16, 16), 3: (8, 8), 4: (4, 4), 5: (2, 2)}


def test_backbone_preserves_nonsquare():
    m = tiny_model()
    stages = backbone_forward(np.zeros((128, 64, 3)), m.params)
    assert stages[2].shape[1:3] == (32, 16)
    assert stages[5].shape[1:3] == (4, 2)


def test_backbone_zero_propagation():
    m = tiny_model()
    stages = backbone_forward(np.zeros((64, 64, 3)), m.params)
    for lvl, t in stages.items():
        npt.assert_array_equal(t.value, 0.0)


def test_backbone_rejects_bad_dimensions():
    m = tiny_model()
    for shape in ((60, 64, 3), (64, 100, 3), (32, 32, 3)):
        with pytest.raises(DimensionError):
            backbone_forward(np.zeros(shape), m.params)
    with pytest.raises(DimensionError):
        check_image(np.full((64, 64, 3), 1.5))


def test_pyramid_shape_law():
    m = tiny_model()
    for h, w in ((64, 64), (128, 64), (192, 128)):
        pyr = pyramid_forward(np.zeros((h, w, 3)), m.params, 4)
        for lvl in (2, 3, 4, 5, 6):
            assert pyr.spatial(lvl) == (h // 2**lvl, w // 2**lvl)


def test_p6_is_half_of_p5():
    m = tiny_model()
    pyr = pyramid_forward(np.zeros((128, 128, 3)), m.params, 4)
    h5, w5 = pyr.spatial(5)
    assert pyr.spatial(6) == (h5 // 2, w5 // 2)


def test_fpn_zero_weights_give_zero_levels():
    m = tiny_model()
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (64, 64, 3))
    for lvl in (2, 3, 4, 5):
        m.params[f"fpn.lateral{lvl}.w"].value[:] = 0
        m.params[f"fpn.lateral{lvl}.b"].value[:] = 0
        m.params[f"fpn.smooth{lvl}.w"].value[:] = 0
        m.params[f"fpn.smooth{lvl}.b"].value[:] = 0
    pyr = pyramid_forward(img, m.params, 4)
    for lvl in (2, 3, 4, 5, 6):
        npt.assert_array_equal(pyr.levels[lvl].value, 0.0)


def test_determinism_same_seed_same_output():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (64, 64, 3))
    out = []
    for _ in range(2):
        m = tiny_model(seed=7)
        pyr = pyramid_forward(img, m.params, 4)
        out.append({lvl: pyr.levels[lvl].value.copy() for lvl in pyr.levels})
    for lvl in out[0]:
        npt.assert_array_equal(out[0][lvl], out[1][lvl])


def test_channel_mismatch_raises():
    m = tiny_model()
    stages = backbone_forward(np.zeros((64, 64, 3)), m.params)
    bad = dict(m.params)
    bad["fpn.lateral3.w"] = m.params["fpn.lateral2.w"]
    with pytest.raises(ValueError, match="channel mismatch"):
        fpn_forward(stages, bad, 4)


@pytest.mark.slow
def test_backbone_fpn_gradients_match_finite_differences():
    m = tiny_model(seed=3)
    rng = np.random.default_rng(11)
    for t in m.params.values():
        t.value = t.value + rng.uniform(-0.05, 0.05, t.value.shape)
    img = rng.uniform(0, 1, (64, 64, 3))
    params = {k: v for k, v in m.params.items() if k.startswith(("backbone.", "fpn."))}

    def loss():
        pyr = pyramid_forward(img, m.params, 4)
        total = None
        for lvl in (2, 3, 4, 5, 6):
            s = tsum(pyr.levels[lvl])
            total = s if total is None else add(total, s)
        return total

    report = check_gradients(loss, params, step=1e-5)
    worst = max(report.values())
    assert worst < 1e-4, sorted(report.items(), key=lambda kv: -kv[1])[:3]
