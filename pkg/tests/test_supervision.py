"""Ground-truth transforms: semantic painting, RoI mask targets, and
detection assignment, each against explicit oracles."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seamask.supervision import (
    InstanceAnnotation,
    detection_targets,
    downsample_labels,
    encode_deltas,
    instances_to_semantic_map,
    roi_mask_targets,
)


def block_instance(class_id, y, x, h, w, size=32):
    mask = np.zeros((size, size), dtype=bool)
    mask[y : y + h, x : x + w] = True
    return InstanceAnnotation(class_id=class_id, mask=mask)


def test_empty_annotations_give_zero_map():
    out = instances_to_semantic_map([], 8, 8)
    npt.assert_array_equal(out, 0)


def test_single_instance_paints_its_class():
    inst = block_instance(3, 2, 4, 5, 6)
    out = instances_to_semantic_map([inst], 32, 32)
    npt.assert_array_equal(out[inst.mask], 3)
    npt.assert_array_equal(out[~inst.mask], 0)


def test_overlap_smaller_area_wins():
    # paint-order oracle over explicit pixel sets
    big = block_instance(1, 0, 0, 10, 10)      # area 100
    small = block_instance(2, 4, 4, 3, 3)      # area 9, inside big
    expected = np.zeros((32, 32), dtype=np.int32)
    expected[0:10, 0:10] = 1
    expected[4:7, 4:7] = 2
    for order in ([big, small], [small, big]):
        npt.assert_array_equal(instances_to_semantic_map(order, 32, 32), expected)


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(4))))
def test_semantic_map_permutation_invariant(perm):
    rng = np.random.default_rng(0)
    anns = []
    for k, side in enumerate((12, 9, 6, 3)):
        y, x = rng.integers(0, 32 - side, 2)
        anns.append(block_instance(k + 1, y, x, side, side))
    base = instances_to_semantic_map(anns, 32, 32)
    shuffled = [anns[i] for i in perm]
    npt.assert_array_equal(instances_to_semantic_map(shuffled, 32, 32), base)


def test_semantic_map_rejects_size_mismatch():
    inst = block_instance(1, 0, 0, 4, 4, size=16)
    with pytest.raises(ValueError, match="mask shape"):
        instances_to_semantic_map([inst], 32, 32)


def test_downsample_labels_keeps_integers():
    labels = np.arange(64).reshape(8, 8) % 5
    small = downsample_labels(labels, 4, 4)
    assert small.shape == (4, 4)
    assert set(np.unique(small)) <= set(np.unique(labels))


# ---------------------------------------------------------------------------
# RoI mask targets


def test_full_coverage_gives_all_ones():
    inst = block_instance(1, 0, 0, 32, 32)
    t = roi_mask_targets(inst, (4.0, 4.0, 20.0, 20.0))
    npt.assert_array_equal(t.m28, 1)
    npt.assert_array_equal(t.m14, 1)
    npt.assert_array_equal(t.m7, 1)


def test_empty_intersection_gives_zeros():
    inst = block_instance(1, 0, 0, 8, 8)
    t = roi_mask_targets(inst, (20.0, 20.0, 10.0, 10.0))
    npt.assert_array_equal(t.m28, 0)
    npt.assert_array_equal(t.m14, 0)
    npt.assert_array_equal(t.m7, 0)


def test_half_covered_proposal_splits_down_the_middle():
    # analytic oracle on the separable step pattern: left half ones
    mask = np.zeros((56, 56), dtype=bool)
    mask[:, :28] = True
    inst = InstanceAnnotation(class_id=1, mask=mask)
    t = roi_mask_targets(inst, (0.0, 0.0, 56.0, 56.0))
    npt.assert_array_equal(t.m28[:, :14], 1)
    npt.assert_array_equal(t.m28[:, 14:], 0)
    npt.assert_array_equal(t.m14[:, :7], 1)
    npt.assert_array_equal(t.m14[:, 7:], 0)
    # odd width: column 3 pools m14 columns 6 (one) and 7 (zero) -> 0.5 -> 1
    npt.assert_array_equal(t.m7[:, :4], 1)
    npt.assert_array_equal(t.m7[:, 4:], 0)


def test_mask_targets_reject_degenerate_box():
    inst = block_instance(1, 0, 0, 8, 8)
    with pytest.raises(ValueError, match="degenerate"):
        roi_mask_targets(inst, (0.0, 0.0, 0.5, 8.0))


def test_bbox_round_trip_rectangle_gives_ones():
    inst = block_instance(2, 5, 7, 12, 9)
    t = roi_mask_targets(inst, inst.bbox)
    npt.assert_array_equal(t.m28, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_target_monotonicity(seed):
    rng = np.random.default_rng(seed)
    base = rng.random((24, 24)) > 0.6
    extra = rng.random((24, 24)) > 0.7
    small = InstanceAnnotation(class_id=1, mask=base, bbox=(0, 0, 24, 24), area=max(int(base.sum()), 1))
    big = InstanceAnnotation(class_id=1, mask=base | extra, bbox=(0, 0, 24, 24), area=max(int((base | extra).sum()), 1))
    x = rng.uniform(0, 12)
    y = rng.uniform(0, 12)
    w = rng.uniform(4, 24 - x)
    h = rng.uniform(4, 24 - y)
    ts = roi_mask_targets(small, (x, y, w, h))
    tb = roi_mask_targets(big, (x, y, w, h))
    for scale in (7, 14, 28):
        assert (tb.by_size(scale) >= ts.by_size(scale)).all()


# ---------------------------------------------------------------------------
# detection targets


def test_proposal_identical_to_gt_has_zero_deltas():
    gt = block_instance(2, 4, 6, 10, 8)
    out = detection_targets(np.array([gt.bbox]), [gt])
    assert out.labels.tolist() == [2]
    npt.assert_allclose(out.deltas, 0.0, atol=1e-12)
    assert out.matched.tolist() == [0]


def test_disjoint_proposal_is_background():
    gt = block_instance(1, 0, 0, 8, 8)
    out = detection_targets(np.array([[20.0, 20.0, 5.0, 5.0]]), [gt])
    assert out.labels.tolist() == [0]
    assert out.matched.tolist() == [-1]


def test_iou_above_threshold_matches_with_delta_oracle():
    gt = block_instance(3, 0, 0, 10, 10)        # box (0, 0, 10, 10)
    proposal = np.array([[0.0, 2.5, 10.0, 10.0]])  # IoU = 75/125 = 0.6
    out = detection_targets(proposal, [gt])
    assert out.labels.tolist() == [3]
    # independent coordinate algebra
    pcx, pcy, pw, ph = 5.0, 7.5, 10.0, 10.0
    gcx, gcy, gw, gh = 5.0, 5.0, 10.0, 10.0
    expected = [(gcx - pcx) / pw, (gcy - pcy) / ph, np.log(gw / pw), np.log(gh / ph)]
    npt.assert_allclose(out.deltas[0], expected, atol=1e-12)


def test_encode_decode_deltas_round_trip():
    from seamask.supervision import decode_deltas

    rng = np.random.default_rng(1)
    props = np.abs(rng.normal(10, 3, (5, 4))) + 1
    gts = np.abs(rng.normal(12, 3, (5, 4))) + 1
    deltas = encode_deltas(props, gts)
    npt.assert_allclose(decode_deltas(props, deltas), gts, atol=1e-9)
