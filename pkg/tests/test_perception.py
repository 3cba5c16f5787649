import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmsc.errors import ContractError
from cmsc.nn import check_module
from cmsc.perception import (DetectionSet, PerceptionHead, average_precision, decode_detections, detect,
                             fuse, iou, nms)
from cmsc.scene import Box, FeatureMap, encode_box


def test_iou_examples():
    a = Box(0.5, 0.5, 1.0, 1.0)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5.0, 5.0, 1.0, 1.0)) == 0.0
    assert iou(a, Box(1.0, 0.5, 1.0, 1.0)) == pytest.approx(1 / 3)


def test_nms_suppresses_overlap():
    boxes = [Box(5, 5, 2, 2), Box(5.1, 5, 2, 2), Box(10, 10, 2, 2)]
    assert nms(boxes, [0.9, 0.8, 0.7]) == [0, 2]
    assert nms(boxes, [0.7, 0.8, 0.9]) == [2, 1]


def test_ap_exact_match_is_one():
    gt = [Box(3, 3, 2, 2), Box(8, 8, 3, 3)]
    assert average_precision(DetectionSet(list(gt), [0.9, 0.9]), gt) == 1.0


def test_ap_no_detections_is_zero():
    assert average_precision(DetectionSet(), [Box(3, 3, 2, 2)]) == 0.0


def test_ap_hand_computed_pr_curve():
    gt = [Box(3, 3, 2, 2), Box(8, 8, 2, 2)]
    dets = DetectionSet([Box(3, 3, 2, 2), Box(20, 20, 2, 2), Box(8, 8, 2, 2)], [0.9, 0.8, 0.7])
    assert average_precision(dets, gt) == pytest.approx(5 / 6)


def test_ap_empty_ground_truth_convention():
    assert average_precision(DetectionSet(), []) == 1.0
    assert average_precision(DetectionSet([Box(1, 1, 1, 1)], [0.5]), []) == 0.0


_box = st.builds(Box, st.floats(2, 14), st.floats(2, 14), st.floats(1, 4), st.floats(1, 4))


@settings(max_examples=300, deadline=None)
@given(st.lists(_box, min_size=1, max_size=6), st.lists(st.tuples(_box, st.floats(0.01, 1.0)), max_size=8))
def test_ap_bounded_and_monotone_in_threshold(gt, dets):
    ds = DetectionSet([b for b, _ in dets], [s for _, s in dets])
    a5 = average_precision(ds, gt, 0.5)
    a7 = average_precision(ds, gt, 0.7)
    assert 0.0 <= a7 <= a5 + 1e-12 <= 1.0 + 1e-12


@pytest.fixture(scope="module")
def head():
    return PerceptionHead(4, rng=np.random.default_rng(0))


def _maps(n, seed=0):
    rng = np.random.default_rng(seed)
    return [FeatureMap(rng.standard_normal((6, 6, 4)), "lidar") for _ in range(n)]


def test_fuse_degenerate_and_idempotent(head):
    ego, a, b = _maps(3)
    alone = fuse(ego, [], head)
    np.testing.assert_array_equal(fuse(ego, [ego], head), alone)
    np.testing.assert_array_equal(fuse(ego, [a, b], head), fuse(ego, [b, a], head))
    np.testing.assert_array_equal(fuse(ego, [a, a], head), fuse(ego, [a], head))
    assert np.all(alone >= 0)


def test_fuse_shape_mismatch(head):
    ego = _maps(1)[0]
    with pytest.raises(ContractError):
        fuse(ego, [FeatureMap(np.zeros((5, 6, 4)), "lidar")], head)


def test_detect_output_shapes(head):
    fused = fuse(*_maps(1), [], head)
    raw, dets = detect(fused, head)
    assert raw.shape == (6, 6, 5) and isinstance(dets, DetectionSet)


def test_decode_reencode_round_trip():
    raw = np.full((4, 4, 5), -20.0)
    raw[2, 1] = [5.0, 0.2, -0.3, np.log(2.0), np.log(1.5)]
    dets = decode_detections(raw)
    assert len(dets) == 1
    np.testing.assert_allclose(encode_box(dets.boxes[0], 2, 1), raw[2, 1, 1:], atol=1e-9)


def test_detection_text_round_trip(tmp_path):
    ds = DetectionSet([Box(1.5, 2.5, 1.0, 2.0)], [0.75])
    ds.save(tmp_path / "d.txt")
    back = DetectionSet.from_text((tmp_path / "d.txt").read_text())
    assert back.scores == [0.75] and back.boxes[0].h == 2.0


def test_head_gradcheck():
    rng = np.random.default_rng(1)
    h = PerceptionHead(3, rng=rng)
    errs = check_module(h, rng.standard_normal((2, 1, 4, 4, 3)))
    assert max(errs.values()) < 1e-4

