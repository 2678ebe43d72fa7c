from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cova.geometry import BoundingBox, Detection, Frame, LabelMap, clamp_box, iou, union_area

coord = st.integers(0, 40)


@st.composite
def int_boxes(draw):
    x0, x1 = sorted((draw(coord), draw(coord)))
    y0, y1 = sorted((draw(coord), draw(coord)))
    return BoundingBox(x0, y0, x1, y1)


def raster(b: BoundingBox) -> np.ndarray:
    m = np.zeros((40, 40), bool)
    m[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] = True
    return m


@given(int_boxes(), int_boxes())
def test_iou_matches_pixel_count_ratio(a, b):
    ma, mb = raster(a), raster(b)
    union = (ma | mb).sum()
    expected = (ma & mb).sum() / union if union else 0.0
    assert iou(a, b) == pytest.approx(expected, abs=1e-12)


@given(int_boxes(), int_boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


def test_iou_of_degenerate_boxes_is_zero_not_nan():
    z = BoundingBox(5, 5, 5, 5)
    assert iou(z, z) == 0.0
    assert iou(z, BoundingBox(0, 0, 10, 10)) == 0.0


@given(st.lists(int_boxes(), max_size=6))
def test_union_area_matches_raster(boxes):
    m = np.zeros((40, 40), bool)
    for b in boxes:
        m |= raster(b)
    assert union_area(boxes, 40, 40) == m.sum()


def test_box_rejects_inverted_and_non_finite():
    with pytest.raises(ValueError):
        BoundingBox(10, 0, 5, 5)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, float("nan"), 5)


def test_clamp_box_keeps_inside_frame():
    b = clamp_box(BoundingBox(-5, -5, 700, 20), 640, 480)
    assert b.as_tuple() == (0, 0, 640, 20)
    outside = clamp_box(BoundingBox(700, 10, 720, 30), 640, 480)
    assert outside.area == 0


def test_xywh_round_trip():
    b = BoundingBox.from_xywh(10, 20, 30, 40)
    assert b.to_xywh() == [10, 20, 30, 40]
    assert b.area == 1200


def test_detection_score_range():
    with pytest.raises(ValueError):
        Detection(BoundingBox(0, 0, 1, 1), "car", 1.5)


def test_frame_validates_pixels_and_derives_id():
    f = Frame("cam", 7, 0, np.zeros((4, 5, 3), np.uint8))
    assert (f.width, f.height, f.frame_id) == (5, 4, "cam_000007")
    with pytest.raises(ValueError):
        Frame("cam", 0, 0, np.zeros((4, 5), np.uint8))


def test_label_map_ids_are_one_based_and_stable():
    lm = LabelMap(["person", "car"])
    assert lm.pairs() == [(1, "person"), (2, "car")]
    assert lm.id_of("car") == 2 and lm.name_of(1) == "person"
    assert "car" in lm and "boat" not in lm
    with pytest.raises(ValueError):
        LabelMap(["a", "a"])
