"""Trident mask head: path shapes, guidance analytics, fusion wiring, loss
values, weight sharing, and gradient checks."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from seamask.gradcheck import check_gradients
from seamask.scmb import (
    GuidancePredictions,
    ScmbConfig,
    baseline_mask_head,
    fused_mask_loss,
    fusion_forward,
    guidance_forward,
    scg_loss,
    scmb_loss,
    trident_forward,
)
from seamask.supervision import MaskSupervisionSet
from seamask.tape import Tensor, avg_pool2d, bilinear_resize
from tests.test_fpn import tiny_model


def random_roi(rng, n=2, channels=4):
    return Tensor(rng.normal(size=(n, 14, 14, channels)))


def random_targets(rng, n=2):
    out = []
    for _ in range(n):
        m28 = (rng.random((28, 28)) > 0.5).astype(np.uint8)
        m14 = (rng.random((14, 14)) > 0.5).astype(np.uint8)
        m7 = (rng.random((7, 7)) > 0.5).astype(np.uint8)
        out.append(MaskSupervisionSet(m7=m7, m14=m14, m28=m28))
    return out


def test_trident_emits_7_14_28_regardless_of_branch_set():
    m = tiny_model()
    rng = np.random.default_rng(0)
    tf = trident_forward(random_roi(rng), m.params)
    assert tf.f7.shape == (2, 7, 7, 2)
    assert tf.f14.shape == (2, 14, 14, 2)
    assert tf.f28.shape == (2, 28, 28, 2)


def test_trident_zero_shrink_weights_give_bias_constant():
    m = tiny_model()
    rng = np.random.default_rng(1)
    for s in (7, 14, 28):
        m.params[f"mask.shrink{s}.w"].value[:] = 0
        m.params[f"mask.shrink{s}.b"].value[:] = np.array([0.25, -0.5])
    tf = trident_forward(random_roi(rng), m.params)
    npt.assert_allclose(tf.f7.value[..., 0], 0.25, atol=1e-12)
    npt.assert_allclose(tf.f14.value[..., 1], -0.5, atol=1e-12)
    npt.assert_allclose(tf.f28.value[..., 0], 0.25, atol=1e-12)


def test_resize_primitives_preserve_constants():
    const = Tensor(np.full((1, 14, 14, 2), 3.25))
    npt.assert_array_equal(avg_pool2d(const, 2).value, 3.25)
    npt.assert_array_equal(bilinear_resize(const, 28, 28).value, 3.25)


def test_guidance_zero_weights_give_half():
    m = tiny_model()
    rng = np.random.default_rng(2)
    for s in (7, 14, 28):
        m.params[f"mask.gp{s}.w"].value[:] = 0
        m.params[f"mask.gp{s}.b"].value[:] = 0
    preds = guidance_forward(trident_forward(random_roi(rng), m.params), m.params)
    for s in (7, 14, 28):
        npt.assert_allclose(preds.by_size(s).value, 0.5, atol=1e-12)


def test_guidance_shapes_and_range():
    m = tiny_model(seed=4)
    rng = np.random.default_rng(3)
    preds = guidance_forward(trident_forward(random_roi(rng, n=3), m.params), m.params)
    assert preds.p7.shape == (3, 7, 7)
    assert preds.p14.shape == (3, 14, 14)
    assert preds.p28.shape == (3, 28, 28)
    for s in (7, 14, 28):
        v = preds.by_size(s).value
        assert (v > 0).all() and (v < 1).all()


def test_scg_loss_at_half_is_ln2_per_path():
    rng = np.random.default_rng(4)
    targets = random_targets(rng, n=2)
    preds = GuidancePredictions(
        p7=Tensor(np.full((2, 7, 7), 0.5)),
        p14=Tensor(np.full((2, 14, 14), 0.5)),
        p28=Tensor(np.full((2, 28, 28), 0.5)),
    )
    npt.assert_allclose(scg_loss(preds, targets, branches=(14,)).item(), math.log(2), atol=1e-12)
    npt.assert_allclose(scg_loss(preds, targets).item(), 3 * math.log(2), atol=1e-12)


def test_scg_loss_near_perfect_predictions():
    rng = np.random.default_rng(5)
    targets = random_targets(rng, n=1)
    eps = 1e-4
    preds = GuidancePredictions(
        p7=Tensor(np.clip(targets[0].m7[None].astype(float), eps, 1 - eps)),
        p14=Tensor(np.clip(targets[0].m14[None].astype(float), eps, 1 - eps)),
        p28=Tensor(np.clip(targets[0].m28[None].astype(float), eps, 1 - eps)),
    )
    assert scg_loss(preds, targets).item() < 1e-3


def test_scg_loss_matches_per_pixel_oracle():
    rng = np.random.default_rng(6)
    pred = rng.uniform(0.05, 0.95, (1, 7, 7))
    target = (rng.random((7, 7)) > 0.5).astype(np.uint8)
    targets = [MaskSupervisionSet(m7=target, m14=np.zeros((14, 14)), m28=np.zeros((28, 28)))]
    preds = GuidancePredictions(
        p7=Tensor(pred), p14=Tensor(np.full((1, 14, 14), 0.5)), p28=Tensor(np.full((1, 28, 28), 0.5))
    )
    got = scg_loss(preds, targets, branches=(7,)).item()
    oracle = 0.0
    for r in range(7):
        for c in range(7):
            y, p = float(target[r, c]), pred[0, r, c]
            oracle += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    oracle /= 49
    assert abs(got - oracle) / abs(oracle) < 1e-10


def test_scg_loss_rejects_size_mismatch():
    rng = np.random.default_rng(7)
    targets = random_targets(rng, n=3)
    preds = GuidancePredictions(
        p7=Tensor(np.full((2, 7, 7), 0.5)),
        p14=Tensor(np.full((2, 14, 14), 0.5)),
        p28=Tensor(np.full((2, 28, 28), 0.5)),
    )
    with pytest.raises(ValueError, match="target shape"):
        scg_loss(preds, targets)


def test_fusion_output_shape_and_default_mode():
    assert ScmbConfig().fusion == "CONCATE"
    m = tiny_model()
    rng = np.random.default_rng(8)
    tf = trident_forward(random_roi(rng, n=3), m.params)
    logits = fusion_forward(tf, m.params, num_classes=2)
    assert logits.shape == (3, 28, 28, 2)


def test_fusion_zeroed_final_conv_gives_half_probability():
    m = tiny_model()
    rng = np.random.default_rng(9)
    m.params["mask.pred.w"].value[:] = 0
    m.params["mask.pred.b"].value[:] = 0
    tf = trident_forward(random_roi(rng), m.params)
    logits = fusion_forward(tf, m.params, num_classes=2)
    npt.assert_array_equal(logits.value, 0.0)
    npt.assert_allclose(1 / (1 + np.exp(-logits.value)), 0.5, atol=1e-12)


def test_multiply_fusion_mode_changes_trunk_input():
    m = tiny_model(**{"scmb.fusion": "MULTIPLY"})
    rng = np.random.default_rng(10)
    tf = trident_forward(random_roi(rng), m.params)
    logits = fusion_forward(tf, m.params, num_classes=2, fusion="MULTIPLY")
    assert logits.shape == (2, 28, 28, 2)


def test_scmb_loss_all_half_is_4ln2():
    m = tiny_model()
    rng = np.random.default_rng(11)
    for s in (7, 14, 28):
        m.params[f"mask.gp{s}.w"].value[:] = 0
        m.params[f"mask.gp{s}.b"].value[:] = 0
    m.params["mask.pred.w"].value[:] = 0
    m.params["mask.pred.b"].value[:] = 0
    roi = random_roi(rng)
    targets = random_targets(rng, n=2)
    tf = trident_forward(roi, m.params)
    preds = guidance_forward(tf, m.params)
    logits = fusion_forward(tf, m.params, num_classes=2)
    loss = scmb_loss(logits, preds, targets, gt_classes=[1, 2])
    npt.assert_allclose(loss.item(), 4 * math.log(2), atol=1e-9)


def test_scmb_loss_near_perfect_is_small():
    rng = np.random.default_rng(12)
    targets = random_targets(rng, n=1)
    eps = 1e-4
    preds = GuidancePredictions(
        p7=Tensor(np.clip(targets[0].m7[None].astype(float), eps, 1 - eps)),
        p14=Tensor(np.clip(targets[0].m14[None].astype(float), eps, 1 - eps)),
        p28=Tensor(np.clip(targets[0].m28[None].astype(float), eps, 1 - eps)),
    )
    big = math.log((1 - eps) / eps)
    logits = np.where(targets[0].m28[None, :, :, None] > 0, big, -big) * np.ones((1, 28, 28, 2))
    loss = scmb_loss(Tensor(logits), preds, targets, gt_classes=[1])
    assert loss.item() < 4e-3


def test_fused_mask_loss_rejects_bad_class():
    rng = np.random.default_rng(13)
    targets = random_targets(rng, n=1)
    logits = Tensor(rng.normal(size=(1, 28, 28, 2)))
    with pytest.raises(ValueError, match="class ids"):
        fused_mask_loss(logits, targets, [3])


def test_weight_sharing_structure():
    m = tiny_model(seed=6)
    rng = np.random.default_rng(14)
    roi = random_roi(rng)
    base = trident_forward(roi, m.params)
    m.params["mask.fcn2.w"].value = m.params["mask.fcn2.w"].value + 0.1
    bumped = trident_forward(roi, m.params)
    assert not np.allclose(base.f7.value, bumped.f7.value)
    assert not np.allclose(base.f14.value, bumped.f14.value)
    assert not np.allclose(base.f28.value, bumped.f28.value)
    m2 = tiny_model(seed=6)
    m2.params["mask.shrink7.w"].value = m2.params["mask.shrink7.w"].value + 0.1
    only7 = trident_forward(roi, m2.params)
    base2 = trident_forward(roi, tiny_model(seed=6).params)
    assert not np.allclose(base2.f7.value, only7.f7.value)
    npt.assert_array_equal(base2.f14.value, only7.f14.value)
    npt.assert_array_equal(base2.f28.value, only7.f28.value)


def test_single_branch_degenerates_to_baseline_graph():
    m = tiny_model(**{"scmb.branches": [14]})
    rng = np.random.default_rng(15)
    roi = random_roi(rng)
    tf = trident_forward(roi, m.params)
    single = fusion_forward(tf, m.params, num_classes=2, branches=(14,))
    baseline = baseline_mask_head(roi, m.params, num_classes=2)
    npt.assert_array_equal(single.value, baseline.value)


def test_branch_config_validation():
    with pytest.raises(ValueError):
        ScmbConfig(branches=(7, 28))
    with pytest.raises(ValueError):
        ScmbConfig(branches=())
    for ok in ((7, 14), (14, 28), (7, 14, 28), (14,)):
        ScmbConfig(branches=ok)


@pytest.mark.slow
def test_scmb_gradients_match_finite_differences():
    m = tiny_model(seed=9)
    rng = np.random.default_rng(16)
    for t in m.params.values():
        t.value = t.value + rng.uniform(-0.05, 0.05, t.value.shape)
    roi = rng.normal(size=(2, 14, 14, 4))
    targets = random_targets(rng, n=2)
    gt_classes = [1, 2]

    def loss():
        tf = trident_forward(Tensor(roi), m.params)
        preds = guidance_forward(tf, m.params)
        logits = fusion_forward(tf, m.params, num_classes=2)
        return scmb_loss(logits, preds, targets, gt_classes)

    params = {k: v for k, v in m.params.items() if k.startswith("mask.")}
    report = check_gradients(loss, params, step=1e-5)
    worst = max(report.values())
    assert worst < 1e-4, sorted(report.items(), key=lambda kv: -kv[1])[:3]
