import copy
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pointmine.dataset_io import (
    FeaturePyramid,
    FormatError,
    PseudoLabel,
    SceneError,
    SceneFeaturizer,
    handcrafted_descriptor,
    load_corpus,
    load_feature_pyramid,
    load_scene,
    mask_to_rle_obj,
    parse_scene,
    read_pseudo_labels,
    read_soft_mask,
    roi_pool_features,
    scene_to_doc,
    write_feature_pyramid,
    write_pseudo_labels,
    write_soft_mask,
)
from pointmine.geometry import Box, mask_to_box


def minimal_doc():
    return {
        "image_id": "img",
        "width": 8,
        "height": 6,
        "annotations": [{"instance_id": 7, "point": [2.0, 3.0], "class_id": 0}],
        "bags": [{"instance_id": 7, "proposals": [{"box": [1, 1, 3, 4]}]}],
    }


def mask_doc():
    d = minimal_doc()
    m = np.zeros((6, 8), bool)
    m[2:5, 1:4] = True
    d["bags"][0]["proposals"] = [{"mask": mask_to_rle_obj(m), "score": 0.7}]
    return d, m


class TestLoadScene:
    def test_minimal(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text(json.dumps(minimal_doc()))
        s = load_scene(p)
        assert s.n_instances == 1 and len(s.bags[0]) == 1
        assert s.bags[0].proposals[0].box[:4] == (1, 1, 3, 4)

    def test_mask_only_proposals_get_derived_boxes(self):
        d, m = mask_doc()
        s = parse_scene(d)
        assert s.bags[0].proposals[0].box[:4] == mask_to_box(m)[:4]

    def test_point_outside_names_instance(self):
        d = minimal_doc()
        d["annotations"][0]["point"] = [9.0, 1.0]
        with pytest.raises(SceneError, match="instance_id 7"):
            parse_scene(d)

    def test_box_disagreeing_with_mask(self):
        d, _ = mask_doc()
        d["bags"][0]["proposals"][0]["box"] = [0, 0, 2, 2]
        with pytest.raises(SceneError, match="disagrees"):
            parse_scene(d)

    def test_rle_checksum(self):
        d, _ = mask_doc()
        d["bags"][0]["proposals"][0]["mask"]["counts"].append(3)
        with pytest.raises(SceneError, match="checksum"):
            parse_scene(d)

    def test_feature_dimension_mismatch(self):
        d = minimal_doc()
        d["bags"][0]["proposals"] = [{"box": [0, 0, 1, 1], "feature": [1.0, 2.0]},
                                     {"box": [0, 0, 2, 2], "feature": [1.0]}]
        with pytest.raises(SceneError, match="dimension"):
            parse_scene(d)

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{")
        with pytest.raises(SceneError):
            load_scene(p)

    def test_doc_roundtrip(self, small_corpus):
        s = small_corpus[0].scene
        t = parse_scene(json.loads(json.dumps(scene_to_doc(s))))
        assert t.image_id == s.image_id and t.n_instances == s.n_instances
        for a, b in zip(s.bags, t.bags):
            assert np.array_equal(a.boxes, b.boxes)
            assert all(np.array_equal(p.mask, q.mask) for p, q in zip(a.proposals, b.proposals))
        assert set(t.gt) == set(s.gt)


# Each mutation breaks exactly one documented invariant.
MUTATIONS = {
    "no image_id": lambda d: d.pop("image_id"),
    "empty image_id": lambda d: d.update(image_id=""),
    "zero width": lambda d: d.update(width=0),
    "float height": lambda d: d.update(height=6.5),
    "no annotations": lambda d: d.update(annotations=[]),
    "duplicate instance": lambda d: d["annotations"].append(dict(d["annotations"][0])),
    "negative class": lambda d: d["annotations"][0].update(class_id=-1),
    "class over K": lambda d: d.update(num_classes=1) or d["annotations"][0].update(class_id=1),
    "bad point": lambda d: d["annotations"][0].update(point=[1.0]),
    "point outside": lambda d: d["annotations"][0].update(point=[1.0, 6.0]),
    "missing bag": lambda d: d.update(bags=[]),
    "orphan bag": lambda d: d["bags"][0].update(instance_id=99),
    "empty bag": lambda d: d["bags"][0].update(proposals=[]),
    "proposal without geometry": lambda d: d["bags"][0].update(proposals=[{"score": 0.5}]),
    "negative box": lambda d: d["bags"][0]["proposals"][0].update(box=[0, 0, -1, 2]),
    "score over 1": lambda d: d["bags"][0]["proposals"][0].update(score=1.5),
    "nan feature": lambda d: d["bags"][0]["proposals"][0].update(feature=[float("nan")]),
}


@pytest.mark.parametrize("name", sorted(MUTATIONS))
def test_schema_mutation_rejected(name):
    d = minimal_doc()
    MUTATIONS[name](d)
    with pytest.raises(SceneError):
        parse_scene(d)


@given(
    x=st.floats(0, 7.999), y=st.floats(0, 5.999), score=st.floats(0, 1),
    cls=st.integers(0, 5), box=st.tuples(st.floats(-5, 10), st.floats(-5, 10), st.floats(0, 10), st.floats(0, 10)),
)
def test_valid_documents_accepted(x, y, score, cls, box):
    d = minimal_doc()
    d["annotations"][0].update(point=[x, y], class_id=cls)
    d["bags"][0]["proposals"][0].update(box=list(box), score=score)
    s = parse_scene(d)
    assert s.points[0].class_id == cls


class TestFeaturePyramid:
    def test_zeros(self, tmp_path):
        p = tmp_path / "z.sapf"
        write_feature_pyramid(FeaturePyramid([np.zeros((1, 2, 2), np.float32)]), p)
        pyr = load_feature_pyramid(p)
        assert len(pyr.levels) == 1 and not pyr.levels[0].any()

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.sapf"
        write_feature_pyramid(FeaturePyramid([np.ones((2, 3, 3), np.float32)]), p)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(FormatError, match="declares"):
            load_feature_pyramid(p)

    def test_nan_payload(self, tmp_path):
        p = tmp_path / "n.sapf"
        write_feature_pyramid(FeaturePyramid([np.full((1, 1, 2), np.nan, np.float32)]), p)
        with pytest.raises(FormatError, match="non-finite"):
            load_feature_pyramid(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.sapf"
        p.write_bytes(b"XXXX\0\0\0\0")
        with pytest.raises(FormatError):
            load_feature_pyramid(p)

    def test_layout(self, tmp_path):
        p = tmp_path / "l.sapf"
        write_feature_pyramid(FeaturePyramid([np.arange(6, dtype=np.float32).reshape(1, 2, 3)]), p)
        raw = p.read_bytes()
        assert raw[:4] == b"SAPF"
        assert np.frombuffer(raw[20:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=3),
       st.integers(0, 2**31))
def test_pyramid_roundtrip_bit_exact(tmp_path_factory, shapes, seed):
    rng = np.random.default_rng(seed)
    levels = [rng.normal(size=s).astype(np.float32) for s in shapes]
    p = tmp_path_factory.mktemp("pyr") / "r.sapf"
    write_feature_pyramid(FeaturePyramid(levels), p)
    back = load_feature_pyramid(p).levels
    assert all(a.tobytes() == b.tobytes() for a, b in zip(levels, back))


class TestPseudoLabels:
    def test_empty(self, tmp_path):
        p = tmp_path / "e.json"
        write_pseudo_labels([], p)
        assert json.loads(p.read_text())["labels"] == []
        assert read_pseudo_labels(p) == []

    def test_box_roundtrip(self, tmp_path):
        p = tmp_path / "one.json"
        lab = PseudoLabel("a", 3, 1, Box(0.1, 0.2, 3.3, 4.4), Box(1 / 3, 2 / 7, 5.0, 6.0), scores={"x": 0.5})
        write_pseudo_labels([lab], p)
        back = read_pseudo_labels(p)[0]
        assert back.b_psm[:4] == lab.b_psm[:4] and back.b_srm[:4] == lab.b_srm[:4]
        assert back.scores == {"x": 0.5}

    def test_soft_mask_sidecar(self, tmp_path):
        p = tmp_path / "soft.json"
        m = np.zeros((4, 5), bool)
        m[1:3, 1:4] = True
        soft = np.linspace(0, 1, 20, dtype=np.float32).reshape(4, 5)
        lab = PseudoLabel("img/1", 0, 0, Box(0, 0, 1, 1), Box(0, 0, 1, 1), m, soft, None)
        write_pseudo_labels([lab], p)
        row = json.loads(p.read_text())["labels"][0]
        assert row["soft_mask_I"].startswith("soft.soft/") and row["soft_mask_S"] is None
        assert (tmp_path / row["soft_mask_I"]).exists()
        back = read_pseudo_labels(p)[0]
        assert np.array_equal(back.mask, m) and np.array_equal(back.soft_I, soft)

    def test_soft_mask_format(self, tmp_path):
        p = tmp_path / "m.f32"
        write_soft_mask(np.array([[0.25, 1.0]], np.float32), p)
        assert np.array_equal(read_soft_mask(p), [[0.25, 1.0]])
        p.write_bytes(p.read_bytes()[:-1])
        with pytest.raises(FormatError):
            read_soft_mask(p)


class TestFeaturizer:
    def test_descriptor_dimension_and_determinism(self):
        s = parse_scene(mask_doc()[0])
        f = SceneFeaturizer(s, "auto")
        assert f.mode == "descriptor"
        a, b = f.bag_features(0), f.bag_features(0)
        assert a.shape == (1, 12) and np.array_equal(a, b)

    def test_descriptor_values(self):
        m = np.zeros((6, 8), bool)
        m[2:5, 1:4] = True
        from pointmine.geometry import Point

        d = handcrafted_descriptor(Box(1, 2, 3, 3), m, 0.7, Point(2.5, 3.5, 0, 0), 8, 6)
        assert d[4] == pytest.approx(1.0)  # full box
        assert d[5] == 0.7 and d[8] == pytest.approx(0.0)

    def test_inline_when_no_pyramid(self):
        d = minimal_doc()
        d["bags"][0]["proposals"][0]["feature"] = [1.0, 2.0, 3.0]
        f = SceneFeaturizer(parse_scene(d))
        assert f.mode == "inline" and f.bag_features(0).tolist() == [[1.0, 2.0, 3.0]]

    def test_roi_when_pyramid(self, small_corpus):
        s = small_corpus[0].scene
        f = SceneFeaturizer(s)
        C = s.pyramid.levels[0].shape[0]
        assert f.mode == "roi" and f.dim == 4 * C + 2

    def test_roi_pool_mean_and_max(self):
        level = np.zeros((1, 4, 4))
        level[0, 1, 1] = 4.0
        f = roi_pool_features(level, np.array([[0, 0, 2, 2]]), 4, 4)[0]
        C = 1
        assert f[0] == pytest.approx(1.0)  # mean over 4 pixels
        assert f[C] == pytest.approx(4.0)  # max
        assert f[-2:] == pytest.approx([0.5, 0.5])


def test_missing_pyramid_modes(tmp_path, small_corpus):
    from pointmine.synth import SynthSpec, write_corpus

    write_corpus(small_corpus[:2], SynthSpec(n_scenes=2, seed=5), tmp_path)
    victim = sorted(tmp_path.glob("*.sapf"))[0]
    victim.unlink()
    with pytest.raises(SceneError, match="feature_pyramid"):
        load_corpus(tmp_path)
    with pytest.warns(UserWarning, match="not found"):
        scenes = load_corpus(tmp_path, missing_pyramid="warn")
    assert [s.pyramid is None for s in scenes] == [True, False]
