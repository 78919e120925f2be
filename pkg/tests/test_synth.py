import json

import numpy as np
import pytest

from pointmine.dataset_io import load_corpus
from pointmine.geometry import mask_to_box, points_in_boxes
from pointmine.pipeline import PipelineConfig, run_select
from pointmine.synth import (
    SynthSpec,
    corrupt_mask,
    generate_corpus,
    generate_scene,
    oracle_best_iou,
    oracle_tree_filter,
    write_corpus,
)
from pointmine.geometry import box_iou


def test_single_gt_proposal():
    g = generate_scene(SynthSpec(min_instances=1, max_instances=1, proposals=1, part_fraction=0.0), 0)
    bag = g.scene.bags[0]
    assert len(bag) == 1 and g.kinds == [["whole"]]
    assert tuple(bag.proposals[0].box) == tuple(g.scene.gt[0].box)


def test_same_seed_identical_bytes(tmp_path):
    spec = SynthSpec(n_scenes=3, seed=11)
    write_corpus(generate_corpus(spec), spec, tmp_path / "a")
    write_corpus(generate_corpus(spec), spec, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_round_trip_through_files(tmp_path):
    spec = SynthSpec(n_scenes=2, seed=4)
    corpus = generate_corpus(spec)
    write_corpus(corpus, spec, tmp_path)
    loaded = load_corpus(tmp_path)
    assert [s.image_id for s in loaded] == [g.scene.image_id for g in corpus]
    assert np.allclose(loaded[0].bags[0].boxes, corpus[0].scene.bags[0].boxes)
    assert json.loads((tmp_path / "corpus.json").read_text())["spec"]["seed"] == 4


def test_group_proposals_hold_two_points(small_corpus):
    found = 0
    for g in small_corpus:
        pts = np.array([[p.x, p.y] for p in g.scene.points])
        for k, partner in g.partners.items():
            j = g.kinds[k].index("group")
            inside = points_in_boxes(pts, g.scene.bags[k].boxes[j : j + 1])[0]
            assert inside[k] and inside[partner]
            found += 1
    assert found > 0


def test_gt_masks_match_boxes(small_corpus):
    for g in small_corpus:
        for gt in g.scene.gt.values():
            assert tuple(mask_to_box(gt.mask)) == tuple(gt.box)


def test_points_inside_their_proposals(small_corpus):
    for g in small_corpus:
        for bag in g.scene.bags:
            p = np.array([[bag.point.x, bag.point.y]])
            assert points_in_boxes(p, bag.boxes).all()


def test_planted_part_bias(small_corpus):
    labels = run_select([g.scene for g in small_corpus], PipelineConfig(mode="mil")).labels
    k = part = oracle_part = n = 0
    for g in small_corpus:
        for j, bag in enumerate(g.scene.bags):
            idx = int(np.argmin(np.abs(bag.boxes - np.array(labels[k].b_srm[:4])).sum(axis=1)))
            k += 1
            n += 1
            part += g.kinds[j][idx] == "part"
            oracle_part += g.kinds[j][oracle_best_iou(bag, g.scene.gt[j].box)] == "part"
    assert part / n >= 0.3 and oracle_part == 0


def test_oracle_best_iou(small_corpus):
    bag = small_corpus[0].scene.bags[0]
    for j, p in enumerate(bag.proposals):
        ious = [box_iou(q.box, p.box) for q in bag.proposals]
        assert oracle_best_iou(bag, p.box) == ious.index(max(ious))


def test_oracle_tree_filter_cases():
    assert np.allclose(oracle_tree_filter(np.full((3, 3), 0.2), np.ones((3, 2)), np.ones((2, 3)), 0.5), 0.2)
    y = oracle_tree_filter(np.array([[1.0, 0.0]]), np.array([[4.0]]), np.zeros((0, 2)), 2.0)
    assert y[0, 0] == pytest.approx(0.7311, abs=1e-4)
    with pytest.raises(ValueError):
        oracle_tree_filter(np.zeros((13, 2)), np.zeros((13, 1)), np.zeros((12, 2)), 1.0)


def test_corrupt_mask_changes_mask(rng):
    m = np.zeros((30, 30), bool)
    m[8:22, 8:22] = True
    c = corrupt_mask(m, rng)
    assert (c & ~m).any() and (m & ~c).any()


@pytest.mark.parametrize("bad", [{"n_scenes": 0}, {"min_instances": 3, "max_instances": 2},
                                 {"part_fraction": 1.5}, {"num_classes": 99}])
def test_invalid_spec(bad):
    with pytest.raises(ValueError):
        SynthSpec(**bad)


def test_infeasible_packing():
    with pytest.raises(ValueError, match="infeasible"):
        generate_scene(SynthSpec(width=24, height=24, min_instances=8, max_instances=8), 0)
