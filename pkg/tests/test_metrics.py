import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pointmine.geometry import box_iou, box_to_mask
from pointmine.metrics import (
    DiagnosticReport,
    LocalGapInput,
    bag_rv,
    gap_group,
    gap_local,
    local_eligible,
    miou_box,
    miou_mask,
    rv_ratio,
    rv_threshold,
)


class TestRv:
    def test_tight_rectangle(self):
        m = box_to_mask((2, 3, 4, 5), 10, 10)
        assert rv_ratio(m, (2, 3, 4, 5)) == 1.0

    def test_empty(self):
        assert rv_ratio(np.zeros((4, 4), bool), (0, 0, 4, 4)) == 0.0

    def test_half(self):
        m = np.zeros((4, 4), bool)
        m[:, :2] = True
        assert rv_ratio(m, (0, 0, 4, 4)) == 0.5

    def test_clipped(self):
        assert rv_ratio(np.ones((4, 4), bool), (0, 0, 2, 2)) == 1.0

    def test_zero_area(self):
        with pytest.raises(ValueError):
            rv_ratio(np.ones((2, 2), bool), (0, 0, 0, 2))

    def test_bag_rv_uses_tight_box(self):
        m = np.zeros((6, 6), bool)
        m[1:3, 1:5] = True
        assert bag_rv([m, np.zeros((6, 6), bool)]).tolist() == [1.0, 0.0]


class TestThreshold:
    def test_single(self):
        assert rv_threshold([np.array([0.35])]) == 0.35

    def test_two(self):
        assert rv_threshold([np.array([0.1, 0.4]), np.array([0.8, 0.2])]) == pytest.approx(0.6)

    def test_recompute(self, rng):
        bags = [rng.random(int(rng.integers(1, 6))) for _ in range(20)]
        assert rv_threshold(bags) == pytest.approx(sum(max(b) for b in bags) / 20, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            rv_threshold([])


def item(rv_sel, rv_gt, rv_bag=(0.95, 0.5), areas=(10.0, 50.0), gt_area=40.0):
    return LocalGapInput(np.array(rv_bag), np.array(areas), rv_sel, rv_gt, gt_area)


class TestGapLocal:
    def test_perfect(self):
        assert gap_local([item(0.7, 0.7), item(0.6, 0.6)], 0.8) == 0.0

    def test_single(self):
        assert gap_local([item(0.9, 0.7)], 0.8) == pytest.approx(0.2)

    def test_not_applicable(self):
        # best-ratio proposal is larger than the gt box: not eligible
        assert gap_local([item(0.9, 0.7, areas=(60.0, 5.0))], 0.8) is None

    def test_threshold_strict(self):
        assert not local_eligible(item(0.9, 0.7, rv_bag=(0.8, 0.1)), 0.8)

    def test_brute_force(self, rng):
        items, t = [], 0.6
        for _ in range(30):
            items.append(item(float(rng.random()), float(rng.random()), rng.random(3), rng.uniform(1, 100, 3),
                              float(rng.uniform(1, 100))))
        want = [it.rv_selected - it.rv_gt for it in items
                if it.rv_bag.max() > t and it.box_areas[int(np.argmax(it.rv_bag))] < it.gt_area]
        got = gap_local(items, t)
        assert (got is None and not want) or got == pytest.approx(np.mean(want))


class TestGapGroup:
    def test_single_instance_scenes(self):
        scenes = [np.array([[0, 0, 50, 50]])] * 3
        assert gap_group(scenes, [np.array([[5, 5]])] * 3, [np.array([0])] * 3) == 0.0

    def test_one_of_four(self):
        boxes = np.array([[0, 0, 20, 10], [10, 0, 5, 5], [30, 30, 5, 5], [40, 40, 5, 5]])
        pts = np.array([[2, 2], [12, 2], [32, 32], [42, 42]])
        assert gap_group([boxes], [pts], [np.zeros(4, int)]) == 0.25

    def test_other_class_not_counted(self):
        boxes = np.array([[0, 0, 20, 10], [10, 0, 5, 5]])
        pts = np.array([[2, 2], [12, 2]])
        assert gap_group([boxes], [pts], [np.array([0, 1])]) == 0.0

    def test_hand_count(self):
        # scene 1: a and b swallow each other; scene 2: nothing
        s1 = (np.array([[0, 0, 20, 20], [0, 0, 20, 20], [30, 30, 4, 4]]), np.array([[5, 5], [15, 15], [31, 31]]),
              np.array([1, 1, 1]))
        s2 = (np.array([[0, 0, 4, 4], [10, 10, 4, 4]]), np.array([[1, 1], [11, 11]]), np.array([0, 0]))
        assert gap_group([s1[0], s2[0]], [s1[1], s2[1]], [s1[2], s2[2]]) == pytest.approx(2 / 5)


@given(st.integers(0, 2**31))
def test_gap_group_bounds_and_isolated_scene(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    boxes = np.column_stack([rng.uniform(0, 30, (n, 2)), rng.uniform(1, 30, (n, 2))])
    pts = rng.uniform(0, 50, (n, 2))
    cls = rng.integers(0, 2, n)
    g = gap_group([boxes], [pts], [cls])
    assert 0.0 <= g <= 1.0
    g2 = gap_group([boxes, np.array([[0, 0, 5, 5]])], [pts, np.array([[1, 1]])], [cls, np.array([0])])
    assert g2 * (n + 1) == pytest.approx(g * n)


class TestMiou:
    def test_perfect(self):
        b = [(0, 0, 4, 4), (1, 1, 2, 3)]
        assert miou_box(b, b) == (1.0, 0)

    def test_disjoint(self):
        assert miou_box([(0, 0, 1, 1)], [(5, 5, 1, 1)])[0] == 0.0

    def test_mixed_and_skipped(self, rng):
        sel = [tuple(rng.uniform(0, 10, 2)) + tuple(rng.uniform(1, 5, 2)) for _ in range(6)]
        gt = [tuple(rng.uniform(0, 10, 2)) + tuple(rng.uniform(1, 5, 2)) for _ in range(6)]
        gt[2] = None
        val, skipped = miou_box(sel, gt)
        assert skipped == 1
        assert val == pytest.approx(np.mean([box_iou(s, g) for s, g in zip(sel, gt) if g is not None]))

    def test_mask(self):
        a = np.zeros((4, 4), bool)
        a[:2] = True
        assert miou_mask([a, a, None], [a, ~a, a]) == (0.5, 1)

    def test_permutation_invariant(self, rng):
        sel = [(float(x), 0.0, 3.0, 3.0) for x in rng.uniform(0, 4, 5)]
        gt = [(1.0, 0.0, 3.0, 3.0)] * 5
        p = rng.permutation(5)
        assert miou_box(sel, gt)[0] == pytest.approx(miou_box([sel[i] for i in p], gt)[0])


def test_report_serialization():
    rep = DiagnosticReport(None, 0.1, 0.5, 0.4, 0.7, 3, 0)
    d = json.loads(rep.to_json(include_rows=False))
    assert d["gap_local"] is None and "rows" not in d
    assert "NA" in rep.table()
