import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from segfuse import fusion
from segfuse.classes import KittiClass
from segfuse.errors import InvalidConfig, LengthMismatch, NonFiniteScore
from segfuse.kitti_io import SemanticLabels

CMAP = fusion.ClassMap.default()


@pytest.mark.parametrize("sid,cls", [
    (10, KittiClass.CAR), (252, KittiClass.CAR), (30, KittiClass.PEDESTRIAN), (254, KittiClass.PEDESTRIAN),
    (31, KittiClass.CYCLIST), (253, KittiClass.CYCLIST), (0, KittiClass.UNLABELED),
    (11, KittiClass.UNLABELED), (32, KittiClass.UNLABELED), (65535, KittiClass.UNLABELED),
])
def test_default_class_map(sid, cls):
    assert fusion.map_class(sid, CMAP) == cls


def test_class_map_is_total():
    ids = np.arange(1 << 16)
    out = CMAP(ids)
    assert out.shape == ids.shape
    assert set(np.unique(out)) == {0, 1, 2, 3}
    assert int((out != 0).sum()) == 6


def test_class_map_alternative_table_and_errors():
    cmap = fusion.ClassMap.parse("# riders\n11 -> cyclist\n10 -> Car  # static\n")
    assert fusion.map_class(11, cmap) == KittiClass.CYCLIST
    assert fusion.map_class(252, cmap) == KittiClass.UNLABELED
    with pytest.raises(InvalidConfig):
        fusion.ClassMap.parse("10 car")
    with pytest.raises(InvalidConfig):
        fusion.ClassMap.parse("10 -> truck")
    with pytest.raises(InvalidConfig):
        fusion.ClassMap({70000: KittiClass.CAR})


@pytest.mark.parametrize("cls,vec", [
    (KittiClass.CAR, [0, 1, 0, 0]), (KittiClass.UNLABELED, [1, 0, 0, 0]), (KittiClass.PEDESTRIAN, [0, 0, 1, 0]),
])
def test_one_hot(cls, vec):
    assert fusion.one_hot(cls).tolist() == vec


def test_concat_sem_feature_example():
    pts = np.array([[1, 2, 3, 0.4]], dtype=np.float32)
    out = fusion.concat_sem_feature(np.array([10]), pts, CMAP)
    assert out.dtype == np.float32
    assert out.tolist() == np.array([[1, 2, 3, 0.4, 0, 1, 0, 0]], dtype=np.float32).tolist()


def test_concat_sem_feature_accepts_label_map_and_empty():
    labels = SemanticLabels(np.array([30], np.uint16), np.array([7], np.uint16))
    out = fusion.concat_sem_feature(labels, np.zeros((1, 4), np.float32), CMAP)
    assert out[0, 4:].tolist() == [0, 0, 1, 0]
    assert fusion.concat_sem_feature(np.zeros(0), np.zeros((0, 4), np.float32), CMAP).shape == (0, 8)


def test_concat_length_mismatch():
    with pytest.raises(LengthMismatch):
        fusion.concat_sem_feature(np.zeros(4), np.zeros((5, 4), np.float32), CMAP)
    with pytest.raises(LengthMismatch):
        fusion.concat_score_feature(np.zeros((4, 4)), np.zeros((5, 4), np.float32))


def test_score_examples():
    pts = np.zeros((3, 4), np.float32)
    scores = np.array([[0, 0, 0, 0], [1000, 0, 0, 0], [math.log(1), math.log(2), math.log(3), math.log(4)]])
    out = fusion.concat_score_feature(scores, pts)
    assert np.allclose(out[0, 4:], 0.25, atol=0, rtol=0)
    assert np.abs(out[1, 4:] - [1, 0, 0, 0]).max() <= 1e-6
    # closed form: exp(ln k) / sum = k / 10
    assert np.allclose(out[2, 4:], [0.1, 0.2, 0.3, 0.4], atol=1e-7)


def test_non_finite_scores_rejected():
    s = np.zeros((2, 4))
    s[1, 2] = np.inf
    with pytest.raises(NonFiniteScore):
        fusion.concat_score_feature(s, np.zeros((2, 4), np.float32))


def test_strip_examples():
    fused = np.array([[1, 2, 3, 0.4, 0, 1, 0, 0]], dtype=np.float32)
    assert fusion.strip_semantics(fused).tolist() == np.array([[1, 2, 3, 0.4]], np.float32).tolist()
    assert fusion.strip_semantics(np.zeros((0, 8), np.float32)).shape == (0, 4)


points_st = hnp.arrays(np.float32, st.tuples(st.integers(0, 50), st.just(4)),
                       elements=st.floats(-100, 100, width=32))


@given(points_st, st.data())
def test_label_mode_one_hot_and_geometry_bytes(pts, data):
    ids = np.array(data.draw(st.lists(st.integers(0, 65535), min_size=len(pts), max_size=len(pts))))
    out = fusion.concat_sem_feature(ids, pts, CMAP)
    assert fusion.strip_semantics(out).tobytes() == pts.tobytes()
    sem = out[:, 4:]
    assert np.all((sem == 0) | (sem == 1)) and np.all(sem.sum(axis=1) == 1)


@given(points_st, st.data())
def test_score_mode_unit_sum_and_argmax(pts, data):
    scores = data.draw(hnp.arrays(np.float64, (len(pts), 4), elements=st.floats(-50, 50)))
    out = fusion.concat_score_feature(scores, pts)
    assert fusion.strip_semantics(out).tobytes() == pts.tobytes()
    sem = out[:, 4:].astype(np.float64)
    assert np.all(np.abs(sem.sum(axis=1) - 1) <= 1e-5)
    assert np.all((sem >= 0) & (sem <= 1))
    # argmax agrees wherever the top logit is unique by a visible margin
    srt = np.sort(scores, axis=1)
    clear = srt[:, -1] - srt[:, -2] > 1e-3
    assert np.array_equal(fusion.semantic_argmax(out)[clear], scores.argmax(axis=1)[clear])


def test_class_histogram():
    fused = fusion.concat_sem_feature(np.array([10, 10, 30, 0, 31]), np.zeros((5, 4), np.float32), CMAP)
    assert fusion.class_histogram(fused).tolist() == [1, 2, 1, 1]
