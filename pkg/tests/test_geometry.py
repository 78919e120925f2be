import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pointmine.geometry import (
    Box,
    box_iou,
    box_iou_matrix,
    box_to_mask,
    clip_box,
    mask_iou,
    mask_to_box,
    point_in_box,
    points_in_boxes,
    rle_decode,
    rle_encode,
)


def pixel_iou(a, b, W=40, H=40):
    ma, mb = box_to_mask(a, W, H), box_to_mask(b, W, H)
    u = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / u if u else 0.0


class TestBoxIou:
    def test_identity(self):
        assert box_iou([0, 0, 4, 4], [0, 0, 4, 4]) == 1.0

    def test_disjoint(self):
        assert box_iou([0, 0, 2, 2], [5, 5, 1, 1]) == 0.0

    def test_half_overlap_matches_pixel_count(self):
        assert box_iou([0, 0, 2, 2], [1, 0, 2, 2]) == pytest.approx(1 / 3, abs=1e-12)
        assert pixel_iou([0, 0, 2, 2], [1, 0, 2, 2], 4, 2) == pytest.approx(1 / 3)

    def test_degenerate_union(self):
        assert box_iou([1, 1, 0, 0], [1, 1, 0, 0]) == 0.0

    def test_matrix_agrees_with_scalar(self, rng):
        a = rng.uniform(0, 10, (5, 4))
        b = rng.uniform(0, 10, (7, 4))
        m = box_iou_matrix(a, b)
        for i in range(5):
            for j in range(7):
                assert m[i, j] == pytest.approx(box_iou(a[i], b[j]), abs=1e-12)


int_box = st.tuples(
    st.integers(0, 30), st.integers(0, 30), st.integers(1, 10), st.integers(1, 10)
)


@given(int_box, int_box)
def test_box_iou_symmetric_bounded_and_pixel_exact(a, b):
    v = box_iou(a, b)
    assert v == box_iou(b, a)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(pixel_iou(a, b), abs=1e-9)
    assert (v == 1.0) == (tuple(a) == tuple(b))


class TestMaskIou:
    def test_same(self, rng):
        m = rng.random((5, 6)) < 0.5
        m[0, 0] = True
        assert mask_iou(m, m) == 1.0

    def test_empty_vs_nonempty(self):
        b = np.zeros((3, 3), bool)
        b[1, 1] = True
        assert mask_iou(np.zeros((3, 3), bool), b) == 0.0

    def test_top_vs_left_half(self):
        top = np.zeros((4, 4), bool)
        top[:2] = True
        left = np.zeros((4, 4), bool)
        left[:, :2] = True
        assert mask_iou(top, left) == pytest.approx(4 / 12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_iou(np.zeros((2, 2)), np.zeros((2, 3)))


class TestMaskToBox:
    def test_single_pixel(self):
        m = np.zeros((6, 6), bool)
        m[3, 2] = True
        assert mask_to_box(m)[:4] == (2, 3, 1, 1)

    def test_full(self):
        assert mask_to_box(np.ones((5, 7), bool))[:4] == (0, 0, 7, 5)

    def test_two_pixels(self):
        m = np.zeros((6, 6), bool)
        m[1, 1] = m[2, 4] = True
        assert mask_to_box(m)[:4] == (1, 1, 4, 2)

    def test_empty_is_tagged(self):
        b = mask_to_box(np.zeros((3, 3), bool))
        assert b.empty and b.area == 0


@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_mask_to_box_is_tight(m):
    b = mask_to_box(m)
    if not m.any():
        assert b.empty
        return
    x, y, w, h = (int(v) for v in b[:4])
    inside = np.zeros_like(m)
    inside[y : y + h, x : x + w] = True
    assert not (m & ~inside).any()
    # every side touches the foreground
    assert m[y].any() and m[y + h - 1].any() and m[:, x].any() and m[:, x + w - 1].any()


class TestRle:
    def test_all_zero(self):
        assert rle_encode(np.zeros((2, 2), bool)) == [4]

    def test_all_one(self):
        assert rle_encode(np.ones((2, 2), bool)) == [0, 4]

    def test_first_pixel(self):
        m = np.zeros((2, 2), bool)
        m[0, 0] = True
        assert rle_encode(m) == [0, 1, 3]

    def test_column_major(self):
        m = np.zeros((2, 2), bool)
        m[1, 0] = True  # second pixel in column-major order
        assert rle_encode(m) == [1, 1, 2]

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            rle_decode([1, 2], 2, 2)

    def test_negative_count(self):
        with pytest.raises(ValueError):
            rle_decode([5, -1], 2, 2)


@given(arrays(bool, st.tuples(st.integers(1, 8), st.integers(1, 8))))
def test_rle_roundtrip(m):
    H, W = m.shape
    assert np.array_equal(rle_decode(rle_encode(m), W, H), m)


class TestPointInBox:
    def test_inclusive_corner(self):
        assert point_in_box((0, 0), [0, 0, 1, 1])

    def test_half_open_edge(self):
        assert not point_in_box((1, 1), [0, 0, 1, 1])

    def test_interior(self):
        assert point_in_box((2.5, 2.5), [2, 2, 1, 1])

    def test_table_matches_scalar(self, rng):
        pts = rng.uniform(0, 8, (6, 2))
        boxes = rng.uniform(0, 5, (4, 4))
        t = points_in_boxes(pts, boxes)
        for i in range(4):
            for j in range(6):
                assert t[i, j] == point_in_box(pts[j], boxes[i])


def test_clip_box_stays_in_image():
    b = clip_box(Box(-3, 2, 10, 30), 5, 8)
    assert b[:4] == (0, 2, 5, 6)
