import numpy as np
import pytest

from helpers import make_scene
from pointmine.dataset_io import PseudoLabel
from pointmine.geometry import Box
from pointmine.pipeline import (
    MODES,
    PipelineConfig,
    combined_soft,
    evaluate,
    pmap,
    run_refine,
    run_select,
)


@pytest.fixture(scope="module")
def reports(small_corpus):
    scenes = [g.scene for g in small_corpus]
    return {m: evaluate(scenes, run_select(scenes, PipelineConfig(mode=m)).labels) for m in MODES}


def test_box_miou_ordering(reports):
    assert reports["generator"].miou_box < reports["mil"].miou_box < reports["full"].miou_box


def test_refinement_stage_beats_mil(reports):
    assert reports["guided"].miou_box > reports["mil"].miou_box


def test_rates_in_unit_interval(reports, small_corpus):
    n = sum(len(g.scene.bags) for g in small_corpus)
    for r in reports.values():
        assert 0 <= r.gap_group <= 1 and 0 <= r.miou_box <= 1 and 0 <= r.miou_mask <= 1
        assert r.n_instances == n


def single_gt_scene():
    return make_scene([(5, 5, 0)], [[[2, 2, 8, 7]]], width=16, height=16, gt=[[2, 2, 8, 7]])


@pytest.mark.parametrize("mode", ["mil", "guided", "full"])
def test_only_candidate_is_chosen(mode):
    labels = run_select([single_gt_scene()], PipelineConfig(mode=mode, feature_mode="descriptor")).labels
    assert tuple(labels[0].b_srm[:4]) == (2, 2, 8, 7)


def test_parallelism_does_not_change_labels(small_corpus):
    scenes = [g.scene for g in small_corpus[:6]]
    a = run_select(scenes, PipelineConfig(parallelism=1)).labels
    b = run_select(scenes, PipelineConfig(parallelism=8)).labels
    assert [(x.b_psm, x.b_srm, x.scores) for x in a] == [(x.b_psm, x.b_srm, x.scores) for x in b]


def test_traces_recorded(small_corpus):
    res = run_select([g.scene for g in small_corpus[:4]], PipelineConfig())
    assert set(res.traces) == {"psm", "srm", "sasd"}
    assert res.traces["psm"][-1] < res.traces["psm"][0]


def test_perfect_labels_evaluate_to_one(small_corpus):
    scenes = [g.scene for g in small_corpus[:3]]
    labels = [PseudoLabel(s.image_id, k, s.points[k].class_id, g.box, g.box, g.mask)
              for s in scenes for k, g in s.gt.items()]
    r = evaluate(scenes, labels)
    assert r.miou_box == 1.0 and r.miou_mask == 1.0
    assert r.gap_local is None or r.gap_local == pytest.approx(0.0)


def test_refine_constant_mask_unchanged(small_corpus):
    s = small_corpus[0].scene
    full = np.ones((s.height, s.width), bool)
    lab = PseudoLabel(s.image_id, 0, s.points[0].class_id, Box(0, 0, 1, 1), Box(0, 0, 1, 1), full)
    out, report = run_refine([s], [lab], PipelineConfig())
    assert np.allclose(out[0].soft_I, 1.0) and np.allclose(out[0].soft_S, 1.0)
    assert report.affinity_loss == pytest.approx(0.0, abs=1e-6)


def test_refine_rejects_unknown_image(small_corpus):
    lab = PseudoLabel("nope", 0, 0, Box(0, 0, 1, 1), Box(0, 0, 1, 1))
    with pytest.raises(ValueError, match="unknown image"):
        run_refine([small_corpus[0].scene], [lab], PipelineConfig())


def test_combined_soft():
    a, b = np.array([0.2, 0.8]), np.array([0.4, 0.4])
    assert np.allclose(combined_soft(a, b), [0.3, 0.6])
    assert combined_soft(a, None) is a


def test_pmap_ordered():
    assert pmap(lambda x: x * x, range(20), 8) == [x * x for x in range(20)]


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(mode="bogus")
    with pytest.raises(ValueError):
        PipelineConfig(parallelism=0)
    with pytest.raises(ValueError):
        run_select([], PipelineConfig())
