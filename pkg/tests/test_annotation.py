import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vis2ir.annotation import (AnnotationParseError, AnnotationSet, DegradeConfig, ObjectAnnotation,
                               annotate_oracle, annotation_from_dict, annotation_to_dict, degrade_annotations,
                               load_annotation_set, rle_decode, rle_encode, save_annotation_set, tight_box)
from vis2ir.errors import SchemaVersionError
from vis2ir.scene import GeneratorConfig, ObjectSpec, SceneSpec, footprint, object_id_map, sample_scene


def brute_rle_decode(runs, shape):
    """Pixel-by-pixel oracle: walk the runs, toggling the value after each."""
    H, W = shape
    out = [[False] * W for _ in range(H)]
    pos, value = 0, False
    for r in runs:
        for _ in range(r):
            out[pos // W][pos % W] = value
            pos += 1
        value = not value
    assert pos == H * W
    return np.array(out, dtype=bool)


def _rect(label, x0, y0, x1, y1, shape=(16, 16)):
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return ObjectAnnotation(label, m, (x0, y0, x1, y1))


def test_rle_definition_examples():
    assert not rle_decode([16], (4, 4)).any()
    m = np.zeros((4, 4), bool)
    m[0] = True
    assert rle_encode(m) == [0, 4, 12]
    assert np.array_equal(rle_decode([0, 4, 12], (4, 4)), m)
    assert np.array_equal(brute_rle_decode([0, 4, 12], (4, 4)), m)


def test_rle_randomized_round_trip_against_oracle():
    rng = np.random.default_rng(0)
    for i in range(10_000):
        H, W = rng.integers(1, 9, size=2)
        density = rng.uniform()
        m = rng.random((H, W)) < density
        runs = rle_encode(m)
        assert sum(runs) == H * W
        assert all(r > 0 for r in runs[1:])
        if i % 10 == 0:
            assert np.array_equal(brute_rle_decode(runs, (H, W)), m)
        assert np.array_equal(rle_decode(runs, (H, W)), m)


@settings(max_examples=200, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_rle_round_trip_property(mask):
    assert np.array_equal(rle_decode(rle_encode(mask), mask.shape), mask)


def test_malformed_rle_names_item():
    ann = AnnotationSet((4, 4), [_rect("car", 0, 0, 2, 2, (4, 4)), _rect("tree", 1, 1, 3, 3, (4, 4))])
    d = annotation_to_dict(ann)
    d["items"][1]["mask_rle"] = [3, 4]
    with pytest.raises(AnnotationParseError, match="item 1"):
        annotation_from_dict(d)


def test_unknown_schema():
    d = annotation_to_dict(AnnotationSet((4, 4), []))
    d["schema"] = "fvita-ann-0"
    with pytest.raises(SchemaVersionError):
        annotation_from_dict(d)


def test_file_round_trip(tmp_path):
    ann = AnnotationSet((16, 16), [_rect("car", 1, 2, 5, 9), _rect("person", 8, 8, 16, 16)])
    p = tmp_path / "a.json"
    save_annotation_set(ann, p)
    back = load_annotation_set(p)
    assert back == ann
    assert back.source == "file"
    assert json.loads(p.read_text())["schema"] == "fvita-ann-1"
    save_annotation_set(back, tmp_path / "b.json")
    assert (tmp_path / "b.json").read_bytes() == p.read_bytes()


def test_oracle_three_disjoint_objects():
    objs = tuple(ObjectSpec("car", "rectangle", (x, 4), (8, 8), (1, 0, 0)) for x in (2, 20, 40))
    ann = annotate_oracle(SceneSpec(0, 64, 64, objs, "road", 1.0))
    assert len(ann) == 3
    for i in range(3):
        for j in range(i + 1, 3):
            assert not (ann.items[i].mask & ann.items[j].mask).any()


def test_oracle_drops_fully_occluded():
    a = ObjectSpec("person", "rectangle", (10, 10), (6, 6), (1, 0, 0))
    b = ObjectSpec("building", "rectangle", (8, 8), (12, 12), (0, 1, 0))
    ann = annotate_oracle(SceneSpec(0, 32, 32, (a, b), "road", 1.0))
    assert [it.label for it in ann.items] == ["building"]


def test_oracle_union_and_tight_boxes():
    cfg = GeneratorConfig(count_range=(0, 16))
    for s in range(50):
        spec = sample_scene(s, cfg)
        ann = annotate_oracle(spec)
        union = np.zeros((64, 64), bool)
        for o in spec.objects:
            union |= footprint(o, 64, 64)
        got = np.zeros((64, 64), bool)
        for it in ann.items:
            got |= it.mask
            x0, y0, x1, y1 = it.box
            m = it.mask
            # shrinking any side excludes at least one true pixel
            assert m[:, x0].any() and m[:, x1 - 1].any() and m[y0].any() and m[y1 - 1].any()
            assert not m[:, :x0].any() and not m[:, x1:].any() and not m[:y0].any() and not m[y1:].any()
        assert np.array_equal(union, got)
        # one annotation per object with a non-empty residual footprint
        ids = object_id_map(spec)
        assert len(ann) == len(set(ids[ids >= 0].tolist()))


def test_tight_box():
    m = np.zeros((8, 8), bool)
    m[2:5, 3] = True
    assert tight_box(m) == (3, 2, 4, 5)


def test_degrade_identity():
    ann = annotate_oracle(sample_scene(1, GeneratorConfig(count_range=(4, 8))))
    out = degrade_annotations(ann, DegradeConfig(), seed=3)
    assert out == ann and out.source == "degraded"


def test_degrade_drop_all():
    ann = annotate_oracle(sample_scene(1, GeneratorConfig(count_range=(4, 8))))
    assert len(degrade_annotations(ann, DegradeConfig(p_drop=1.0), seed=3)) == 0


def test_degrade_survival_binomial():
    # 1000 items spread over 20 sets of 50 (below the storage cap)
    items = [_rect("car", i % 10, 0, i % 10 + 4, 4) for i in range(50)]
    kept = sum(len(degrade_annotations(AnnotationSet((16, 16), items), DegradeConfig(p_drop=0.5), seed=k))
               for k in range(20))
    assert abs(kept - 500) <= 3 * np.sqrt(1000 * 0.25)


def test_degrade_deterministic_and_bounded():
    ann = annotate_oracle(sample_scene(2, GeneratorConfig(count_range=(6, 10))))
    cfg = DegradeConfig(p_drop=0.2, radius=2, p_conf=0.5, confusion={"person": ["car"], "car": ["person"]})
    a, b = degrade_annotations(ann, cfg, 5), degrade_annotations(ann, cfg, 5)
    assert a == b
    for it in a.items:
        assert it.box == tight_box(it.mask)


def test_annotation_cap():
    with pytest.raises(ValueError):
        AnnotationSet((16, 16), [_rect("car", 0, 0, 4, 4)] * 65)
