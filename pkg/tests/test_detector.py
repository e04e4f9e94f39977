"""Detector assembly: level assignment, proposals, head losses against scalar
oracles, NMS against a brute-force greedy oracle, inference contracts, and
the SGD update laws."""

import itertools
import math

import numpy as np
import numpy.testing as npt
import pytest

from seamask.config import RunConfig
from seamask.detector import (
    SgdState,
    TrainSample,
    assign_level,
    clip_box,
    detection_head,
    detection_loss,
    infer,
    joint_loss,
    learning_rate,
    nms,
    paste_mask,
    propose,
    sgd_update,
    train_step,
)
from seamask.fpn import pyramid_forward
from seamask.model import build_model
from seamask.supervision import DetectionTargets, InstanceAnnotation, box_iou_matrix
from seamask.tape import Tensor
from tests.test_fpn import TINY, tiny_model


def disc_instance(cls, cy, cx, r, size=64):
    yy, xx = np.mgrid[0:size, 0:size]
    return InstanceAnnotation(class_id=cls, mask=(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r)


def test_assign_level_reference_cases():
    assert assign_level((0, 0, 224, 224)) == 4
    assert assign_level((0, 0, 56, 56)) == 2
    assert assign_level((0, 0, 4000, 4000)) == 5
    assert assign_level((0, 0, 1, 1)) == 2


def test_propose_zero_jitter_reproduces_gt():
    gts = [disc_instance(1, 20, 20, 8), disc_instance(2, 44, 40, 10)]
    props = propose(
        (64, 64), gts=gts, mode="GT_JITTER", replicas=3, background=0,
        jitter_center=0.0, jitter_size=0.0, rng=np.random.default_rng(0),
    )
    assert len(props) == 6
    for i, p in enumerate(props):
        npt.assert_allclose(p.box, gts[i // 3].bbox, atol=1e-9)


def test_propose_counts_and_determinism():
    gts = [disc_instance(1, 20, 20, 8), disc_instance(2, 40, 40, 6), disc_instance(1, 50, 14, 5)]
    a = propose((64, 64), gts=gts, replicas=4, background=8, rng=np.random.default_rng(3))
    b = propose((64, 64), gts=gts, replicas=4, background=8, rng=np.random.default_rng(3))
    assert len(a) == 4 * 3 + 8
    for pa, pb in zip(a, b):
        assert pa.box == pb.box and pa.score == pb.score


def test_propose_requires_gt_in_jitter_mode():
    with pytest.raises(ValueError, match="ground-truth"):
        propose((64, 64), gts=None, mode="GT_JITTER")


def test_detection_head_uniform_logits_is_ln16():
    cfg = RunConfig({**TINY, "num_classes": 15})
    m = build_model(cfg)
    m.params["head.cls.w"].value[:] = 0
    m.params["head.cls.b"].value[:] = 0
    m.params["head.box.w"].value[:] = 0
    m.params["head.box.b"].value[:] = 0
    rng = np.random.default_rng(0)
    feats = Tensor(rng.normal(size=(3, 14, 14, 4)))
    cls_logits, box_deltas = detection_head(feats, m.params)
    targets = DetectionTargets(
        labels=np.array([0, 3, 7]), deltas=np.zeros((3, 4)), matched=np.array([-1, 0, 1])
    )
    loss = detection_loss(cls_logits, box_deltas, targets)
    npt.assert_allclose(loss.item(), math.log(16.0), atol=1e-9)


def test_detection_loss_perfect_deltas_has_zero_regression():
    m = tiny_model()
    rng = np.random.default_rng(1)
    feats = Tensor(rng.normal(size=(2, 14, 14, 4)))
    cls_logits, box_deltas = detection_head(feats, m.params)
    labels = np.array([1, 2])
    perfect = np.stack([box_deltas.value[i, labels[i]] for i in range(2)])
    targets = DetectionTargets(labels=labels, deltas=perfect, matched=np.array([0, 1]))
    loss = detection_loss(cls_logits, box_deltas, targets)
    cls_only = detection_loss(cls_logits, box_deltas, DetectionTargets(labels, perfect * 0 + perfect, targets.matched))
    npt.assert_allclose(loss.item(), cls_only.item(), atol=1e-12)


def test_detection_loss_matches_per_proposal_oracle():
    m = tiny_model(seed=5)
    rng = np.random.default_rng(2)
    feats = Tensor(rng.normal(size=(3, 14, 14, 4)))
    cls_logits, box_deltas = detection_head(feats, m.params)
    labels = np.array([0, 1, 2])
    tgt = rng.normal(size=(3, 4))
    tgt[0] = 0
    targets = DetectionTargets(labels=labels, deltas=tgt, matched=np.array([-1, 0, 1]))
    got = detection_loss(cls_logits, box_deltas, targets).item()

    logits = cls_logits.value
    oracle = 0.0
    for i in range(3):
        z = logits[i] - logits[i].max()
        oracle += -(z[labels[i]] - math.log(np.exp(z).sum())) / 3
    for i in (1, 2):
        d = box_deltas.value[i, labels[i]] - tgt[i]
        for v in d:
            oracle += (0.5 * v * v if abs(v) < 1 else abs(v) - 0.5) / 3
    assert abs(got - oracle) / abs(oracle) < 1e-10


def test_joint_loss_cases():
    rep = joint_loss(1.0, 2.0, 3.0)
    assert rep.l_total == 6.0
    assert joint_loss(5.0, 7.0, 11.0, alphas=(0, 0, 0)).l_total == 0.0
    rep = joint_loss(1.5, 2.5, 3.5, alphas=(2, 1, 1))
    npt.assert_allclose(rep.l_total, 2 * 1.5 + 2.5 + 3.5, atol=1e-12)
    npt.assert_allclose(
        rep.l_total,
        rep.weights[0] * rep.l_detection + rep.weights[1] * rep.l_segmentation + rep.weights[2] * rep.l_scmb,
        atol=1e-9,
    )
    with pytest.raises(ValueError, match="non-finite"):
        joint_loss(float("nan"), 0.0, 0.0)


def brute_force_nms(boxes, scores, classes, thr):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if classes[i] == classes[j]:
                iou = box_iou_matrix(boxes[i : i + 1], boxes[j : j + 1])[0, 0]
                if iou > thr:
                    ok = False
        if ok:
            kept.append(i)
    return kept


def test_nms_identical_boxes_keeps_highest():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
    keep = nms(boxes, np.array([0.9, 0.8]), np.array([1, 1]))
    assert keep.tolist() == [0]


def test_nms_disjoint_keeps_all():
    boxes = np.array([[0, 0, 5, 5], [10, 10, 5, 5], [20, 20, 5, 5]], dtype=float)
    keep = nms(boxes, np.array([0.5, 0.9, 0.7]), np.array([1, 1, 1]))
    assert sorted(keep.tolist()) == [0, 1, 2]


def test_nms_chain_case():
    # pairwise IoUs: (a,b) ~ 0.6, (b,c) ~ 0.6, (a,c) ~ 0.1 -> keep a and c
    a = np.array([0.0, 0.0, 10.0, 10.0])
    b = np.array([2.5, 0.0, 10.0, 10.0])
    c = np.array([5.5, 0.0, 10.0, 10.0])
    boxes = np.stack([a, b, c])
    iou = box_iou_matrix(boxes, boxes)
    assert iou[0, 1] > 0.5 and iou[1, 2] > 0.5 and iou[0, 2] < 0.5
    keep = nms(boxes, np.array([0.9, 0.8, 0.7]), np.array([1, 1, 1]))
    assert keep.tolist() == brute_force_nms(boxes, [0.9, 0.8, 0.7], [1, 1, 1], 0.5) == [0, 2]


def test_nms_matches_brute_force_on_random_cases():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 8))
        boxes = np.column_stack(
            [rng.uniform(0, 30, n), rng.uniform(0, 30, n), rng.uniform(2, 15, n), rng.uniform(2, 15, n)]
        )
        scores = rng.uniform(0, 1, n)
        classes = rng.integers(1, 3, n)
        got = nms(boxes, scores, classes, 0.5).tolist()
        assert got == brute_force_nms(boxes, scores, classes, 0.5)


def test_nms_output_properties():
    rng = np.random.default_rng(4)
    n = 20
    boxes = np.column_stack(
        [rng.uniform(0, 40, n), rng.uniform(0, 40, n), rng.uniform(2, 20, n), rng.uniform(2, 20, n)]
    )
    scores = rng.uniform(0, 1, n)
    classes = rng.integers(1, 4, n)
    keep = nms(boxes, scores, classes, 0.5)
    kept_scores = scores[keep]
    assert (np.diff(kept_scores) <= 1e-12).all()
    for i, j in itertools.combinations(keep, 2):
        if classes[i] == classes[j]:
            assert box_iou_matrix(boxes[i : i + 1], boxes[j : j + 1])[0, 0] <= 0.5 + 1e-12


def test_paste_mask_stays_inside_box():
    prob = np.ones((28, 28))
    out = paste_mask(prob, (10.2, 5.7, 20.0, 14.0), 64, 64)
    assert out.dtype == bool
    ys, xs = np.nonzero(out)
    assert ys.min() >= 5 and ys.max() <= 20 and xs.min() >= 10 and xs.max() <= 31
    outside = out.copy()
    outside[int(np.floor(5.7)) : int(np.ceil(5.7 + 14)), int(np.floor(10.2)) : int(np.ceil(10.2 + 20))] = False
    assert not outside.any()


def test_clip_box_bounds():
    x, y, w, h = clip_box((-5.0, -3.0, 100.0, 4.0), 64, 64)
    assert x == 0.0 and y == 0.0 and x + w <= 64 and y + h <= 64
    _, _, w2, h2 = clip_box((60.0, 60.0, 0.2, 0.2), 64, 64)
    assert w2 >= 1.0 and h2 >= 1.0


def make_trained_free_model(**over):
    m = tiny_model(**over)
    rng = np.random.default_rng(42)
    for t in m.params.values():
        t.value = t.value + rng.normal(0, 0.05, t.value.shape)
    return m


def test_infer_empty_below_score_floor():
    m = tiny_model(**{"infer.score_floor": 1.1})
    gts = [disc_instance(1, 32, 32, 10)]
    img = np.random.default_rng(0).uniform(0, 1, (64, 64, 3))
    assert infer(img, m, gts=gts) == []


def test_infer_caps_detections_at_max_dets():
    m = make_trained_free_model(**{"infer.max_dets": 5, "infer.score_floor": 0.0, "infer.nms": 1.0,
                                   "proposals.replicas": 8, "proposals.background": 4})
    gts = [disc_instance(1, 24, 24, 10), disc_instance(2, 48, 44, 8)]
    img = np.random.default_rng(1).uniform(0, 1, (64, 64, 3))
    dets = infer(img, m, gts=gts, rng=np.random.default_rng(2))
    assert len(dets) == 5


@pytest.mark.slow
def test_infer_top_1000_cap():
    m = make_trained_free_model(**{"infer.score_floor": 0.0, "infer.nms": 1.0,
                                   "num_classes": 3,
                                   "proposals.replicas": 50, "proposals.background": 16})
    gts = [disc_instance((i % 3) + 1, 16 + 10 * (i // 3), 12 + 14 * (i % 3), 5) for i in range(8)]
    img = np.random.default_rng(20).uniform(0, 1, (64, 64, 3))
    dets = infer(img, m, gts=gts, rng=np.random.default_rng(21))
    raw_candidates = (50 * 8 + 16) * 3
    assert raw_candidates > 1200
    assert len(dets) == 1000


def test_infer_masks_confined_to_boxes():
    m = make_trained_free_model()
    gts = [disc_instance(1, 24, 24, 10)]
    img = np.random.default_rng(3).uniform(0, 1, (64, 64, 3))
    dets = infer(img, m, gts=gts, rng=np.random.default_rng(4))
    assert dets
    for d in dets:
        x, y, w, h = d.box
        outside = d.mask.copy()
        outside[int(np.floor(y)) : int(np.ceil(y + h)), int(np.floor(x)) : int(np.ceil(x + w))] = False
        assert not outside.any()


def test_ablation_identity_baseline_head():
    base_over = {"sea.enabled": False, "scmb.branches": [14]}
    m_scmb = make_trained_free_model(**base_over)
    m_base = tiny_model(**{"sea.enabled": False, "scmb.enabled": False})
    for k in m_base.params:
        m_base.params[k].value = m_scmb.params[k].value.copy()
    gts = [disc_instance(1, 24, 24, 10), disc_instance(2, 44, 48, 8)]
    img = np.random.default_rng(5).uniform(0, 1, (64, 64, 3))
    d1 = infer(img, m_scmb, gts=gts, rng=np.random.default_rng(6))
    d2 = infer(img, m_base, gts=gts, rng=np.random.default_rng(6))
    assert len(d1) == len(d2)
    for a, b in zip(d1, d2):
        assert a.class_id == b.class_id
        assert a.score == b.score
        npt.assert_array_equal(np.asarray(a.box), np.asarray(b.box))
        npt.assert_array_equal(a.mask, b.mask)


def test_train_step_lr_zero_keeps_params():
    m = tiny_model(seed=1)
    gts = [disc_instance(1, 24, 24, 10)]
    img = np.random.default_rng(7).uniform(0, 1, (64, 64, 3))
    before = {k: t.value.copy() for k, t in m.params.items()}
    state = SgdState(m.params)
    train_step([TrainSample(img, gts)], m, state, lr=0.0, step_rng=np.random.default_rng(8))
    for k, t in m.params.items():
        npt.assert_array_equal(t.value, before[k])
    assert any(np.abs(v).max() > 0 for v in state.velocity.values())


def test_weight_decay_closed_form():
    m = tiny_model(seed=2)
    lr, wd = 0.1, 1e-2
    before = {k: t.value.copy() for k, t in m.params.items()}
    state = SgdState(m.params)
    for t in m.params.values():
        t.grad = np.zeros_like(t.value)
    for step in range(3):
        sgd_update(m.params, state, lr=lr, momentum=0.9, weight_decay=wd)
    for k, t in m.params.items():
        npt.assert_allclose(t.value, before[k] * (1 - lr * wd) ** 3, rtol=1e-12)


def test_learning_rate_schedules():
    assert learning_rate(0.01, "constant", 500, 1200) == 0.01
    assert learning_rate(0.01, "step_decay", 100, 1200) == 0.01
    npt.assert_allclose(learning_rate(0.01, "step_decay", 801, 1200), 0.001)
    npt.assert_allclose(learning_rate(0.01, "step_decay", 1101, 1200), 0.0001)


def test_train_step_decreases_loss_on_fixed_image():
    m = tiny_model(seed=3, **{"backbone.stage_widths": [4, 8, 12, 16], "fpn.channels": 12,
                              "sea.width": 12, "scmb.width": 12, "head.hidden": 32})
    rng = np.random.default_rng(9)
    gts = [disc_instance(1, 24, 24, 12), disc_instance(2, 46, 46, 8)]
    img = np.full((64, 64, 3), 0.4)
    img[gts[0].mask] = [0.9, 0.2, 0.2]
    img[gts[1].mask] = [0.2, 0.2, 0.9]
    sample = TrainSample(img, gts)
    state = SgdState(m.params)
    first = train_step([sample], m, state, lr=0.01, step_rng=np.random.default_rng([0, 0]))
    losses = [first.l_total]
    for step in range(1, 30):
        rep = train_step([sample], m, state, lr=0.01, step_rng=np.random.default_rng([0, step]))
        losses.append(rep.l_total)
    assert np.mean(losses[-5:]) < losses[0] * 0.9


def test_rpn_lite_mode_runs_and_is_deterministic():
    over = {"proposals.mode": "RPN_LITE", "proposals.rpn_topk": 16}
    m = tiny_model(**over)
    img = np.random.default_rng(10).uniform(0, 1, (64, 64, 3))
    pyr = pyramid_forward(img, m.params, 4)
    a = propose((64, 64), pyramid=pyr, params=m.params, mode="RPN_LITE", rpn_topk=16)
    b = propose((64, 64), pyramid=pyr, params=m.params, mode="RPN_LITE", rpn_topk=16)
    assert [p.box for p in a] == [p.box for p in b]
    assert 0 < len(a) <= 16
    gts = [disc_instance(1, 24, 24, 10)]
    state = SgdState(m.params)
    rep = train_step([TrainSample(img, gts)], m, state, lr=0.001, step_rng=np.random.default_rng(11))
    assert np.isfinite(rep.l_total)
