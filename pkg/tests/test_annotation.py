import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capforge.annotation import (
    AnnotationSet, BoundingBox, InconsistentDimension, MalformedFeatureFile,
    NonFiniteFeature, build_annotation_set, dump_features, load_feature_file,
    mask_to_mean, parse_features, select_top_boxes, synthetic_extractor,
)


class ConstExtractor:
    def __init__(self, out_dim, value=0.0):
        self.out_dim = out_dim
        self.value = value

    def extract(self, image):
        return np.full(self.out_dim, self.value)


class MeanExtractor:
    """Feature = per-channel mean of the input repeated; exposes what it was fed."""

    def __init__(self, out_dim):
        self.out_dim = out_dim

    def extract(self, image):
        return np.resize(np.asarray(image).mean(axis=(0, 1)), self.out_dim)


def test_select_top_boxes():
    boxes = [BoundingBox(0, 0, 1, 1, score=s) for s in [0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.8, 0.4, 0.6, 0.0]]
    top = select_top_boxes(boxes, 5)
    assert [b.score for b in top] == [0.9, 0.8, 0.7, 0.6, 0.5]
    assert [b.score for b in select_top_boxes(boxes[:3], 5)] == [0.9, 0.3, 0.1]
    assert select_top_boxes([], 5) == []


def test_select_top_boxes_tie_keeps_input_order():
    a, b = BoundingBox(1, 0, 1, 1, 0.5), BoundingBox(2, 0, 1, 1, 0.5)
    assert select_top_boxes([a, b], 2) == [a, b]
    assert select_top_boxes([b, a], 2) == [b, a]


def test_mask_whole_image_is_identity():
    img = np.random.default_rng(0).uniform(size=(5, 7, 3))
    out = mask_to_mean(img, BoundingBox(0, 0, 7, 5), [0.1, 0.2, 0.3])
    np.testing.assert_array_equal(out, img)


def test_mask_zero_width_is_all_mean():
    img = np.ones((4, 4, 2))
    out = mask_to_mean(img, BoundingBox(1, 1, 0, 3), [0.25, 0.75])
    assert np.all(out[..., 0] == 0.25) and np.all(out[..., 1] == 0.75)


def test_mask_hand_grid():
    img = np.ones((4, 4, 1))
    out = mask_to_mean(img, BoundingBox(0, 0, 2, 2), [0.5])
    expected = np.full((4, 4, 1), 0.5)
    expected[:2, :2] = 1.0
    np.testing.assert_array_equal(out, expected)
    assert (out == 1.0).sum() == 4 and (out == 0.5).sum() == 12


def test_mask_leaves_input_and_clips():
    img = np.arange(16.0).reshape(4, 4, 1)
    before = img.copy()
    out = mask_to_mean(img, BoundingBox(2, 2, 10, 10), [-1.0])
    np.testing.assert_array_equal(img, before)
    np.testing.assert_array_equal(out[2:, 2:], img[2:, 2:])
    assert (out == -1.0).sum() == 12


def test_mask_channel_mismatch():
    with pytest.raises(ValueError):
        mask_to_mean(np.ones((2, 2, 3)), BoundingBox(0, 0, 1, 1), [0.0])


boxes_st = st.builds(BoundingBox, st.integers(0, 6), st.integers(0, 6), st.integers(0, 6), st.integers(0, 6))


@given(boxes_st, st.floats(-2, 2))
def test_mask_idempotent(box, mean):
    img = np.random.default_rng(1).uniform(size=(6, 6, 1))
    once = mask_to_mean(img, box, [mean])
    np.testing.assert_array_equal(mask_to_mean(once, box, [mean]), once)


def test_five_objects_at_4096_give_6x8192():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 255, (32, 32, 3))
    boxes = [BoundingBox(i, i, 10, 10, score=i / 10) for i in range(7)]
    ann = build_annotation_set(img, boxes, 5, synthetic_extractor(0, 4096), synthetic_extractor(1, 4096), [0, 0, 0])
    assert ann.shape == (6, 8192)
    assert ann.n_objects == 5


def test_whole_image_row_is_doubled():
    img = np.random.default_rng(3).uniform(size=(8, 8, 3))
    obj = synthetic_extractor(5, 3)
    boxes = [BoundingBox(0, 0, 4, 4, 0.9), BoundingBox(4, 4, 4, 4, 0.8)]
    ann = build_annotation_set(img, boxes, 2, obj, synthetic_extractor(6, 3), [0, 0, 0])
    assert ann.shape == (3, 6)
    v = obj.extract(img)
    np.testing.assert_array_equal(ann.rows[2], np.concatenate([v, v]))


def test_rows_are_crop_and_masked_features():
    img = np.zeros((4, 4, 1))
    img[:2, :2] = 8.0
    box = BoundingBox(0, 0, 2, 2, 1.0)
    ann = build_annotation_set(img, [box], 1, MeanExtractor(1), MeanExtractor(1), [2.0])
    # obj sees the 2x2 crop (all 8); loc sees 4 pixels of 8 and 12 of the mean 2
    np.testing.assert_allclose(ann.rows[0], [8.0, (4 * 8 + 12 * 2) / 16])
    np.testing.assert_allclose(ann.rows[1], [2.0, 2.0])


def test_zero_extractors_give_zero_matrix():
    img = np.ones((5, 5, 1))
    boxes = [BoundingBox(0, 0, 2, 2, 0.5)] * 3
    ann = build_annotation_set(img, boxes, 5, ConstExtractor(4), ConstExtractor(4), [0])
    np.testing.assert_array_equal(ann.rows, np.zeros((4, 8)))


def test_build_errors():
    img = np.ones((5, 5, 1))
    with pytest.raises(ValueError, match="widths differ"):
        build_annotation_set(img, [BoundingBox(0, 0, 2, 2)], 1, ConstExtractor(3), ConstExtractor(4), [0])
    with pytest.raises(ValueError, match="no boxes"):
        build_annotation_set(img, [], 1, ConstExtractor(3), ConstExtractor(3), [0])
    with pytest.raises(ValueError, match="no pixels"):
        build_annotation_set(img, [BoundingBox(9, 9, 2, 2)], 1, ConstExtractor(3), ConstExtractor(3), [0])


@settings(max_examples=25, deadline=None)
@given(st.permutations(range(6)), st.integers(1, 6))
def test_box_permutation_invariance(perm, n):
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(12, 12, 3))
    boxes = [BoundingBox(i, 11 - 2 * i, 3, 4, score=0.1 * i) for i in range(6)]
    obj, loc = synthetic_extractor(1, 4), synthetic_extractor(2, 4)
    a = build_annotation_set(img, boxes, n, obj, loc, [0.5] * 3)
    b = build_annotation_set(img, [boxes[k] for k in perm], n, obj, loc, [0.5] * 3)
    np.testing.assert_array_equal(a.rows, b.rows)
    assert a.shape == (min(n, 6) + 1, 8)


def test_synthetic_extractor():
    img = np.random.default_rng(0).uniform(size=(6, 5, 3))
    e1, e2 = synthetic_extractor(1, 64), synthetic_extractor(2, 64)
    np.testing.assert_array_equal(e1.extract(img), e1.extract(img.copy()))
    assert not np.array_equal(e1.extract(img), e2.extract(img))
    other = img.copy()
    other[0, 0, 0] += 1e-9
    assert not np.array_equal(e1.extract(img), e1.extract(other))
    vals = np.concatenate([synthetic_extractor(s, 256).extract(img) for s in range(10)])
    assert vals.min() >= -1.0 and vals.max() <= 1.0


def test_annotation_set_rejects_nonfinite():
    with pytest.raises(ValueError):
        AnnotationSet(np.array([[1.0, np.nan]]))


FIXTURE = """ANNOT v1 D=8
imgA 6
{rows}
imgB 6
{rows}
"""


def test_feature_file_two_images(tmp_path):
    rows = "\n".join(" ".join(f"{0.5 * (r + c):.1f}" for c in range(8)) for r in range(6))
    path = tmp_path / "feats.annot"
    path.write_text(FIXTURE.format(rows=rows))
    feats = load_feature_file(path)
    assert list(feats) == ["imgA", "imgB"]
    assert feats["imgA"].shape == (6, 8)
    assert feats["imgB"].rows[5, 7] == 6.0


def test_feature_file_empty_body():
    assert parse_features("ANNOT v1 D=8\n") == {}


def test_feature_file_errors():
    with pytest.raises(InconsistentDimension, match="imgX"):
        parse_features("ANNOT v1 D=3\nimgX 2\n1 2 3\n1 2\n")
    with pytest.raises(NonFiniteFeature, match="imgY"):
        parse_features("ANNOT v1 D=2\nimgY 1\n1 nan\n")
    with pytest.raises(MalformedFeatureFile):
        parse_features("ANNOT v2 D=2\n")
    with pytest.raises(MalformedFeatureFile, match="expected 2 rows"):
        parse_features("ANNOT v1 D=2\nimgZ 2\n1 2\n")
    with pytest.raises(MalformedFeatureFile):
        parse_features("")


def test_feature_file_roundtrip():
    rng = np.random.default_rng(0)
    feats = {"a": AnnotationSet(rng.normal(size=(3, 4))), "b": AnnotationSet(rng.normal(size=(6, 4)))}
    back = parse_features(dump_features(feats))
    for k in feats:
        np.testing.assert_array_equal(back[k].rows, feats[k].rows)
    with pytest.raises(InconsistentDimension):
        dump_features({"a": AnnotationSet(np.zeros((1, 2))), "b": AnnotationSet(np.zeros((1, 3)))})
