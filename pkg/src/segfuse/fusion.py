"""Semantic feature concatenation onto LiDAR points.

Every point (x, y, z, r) gains a 4-wide semantic block (s0..s3) ordered
unlabeled, car, pedestrian, cyclist. Label mode writes a one-hot vector of
the mapped class; score mode writes the softmax of per-point class scores.
"""

from importlib import resources
from pathlib import Path

import numpy as np

from .classes import NUM_CLASSES, KittiClass
from .errors import InvalidConfig, LengthMismatch, NonFiniteScore

_ID_SPACE = 1 << 16
_EYE = np.eye(NUM_CLASSES, dtype=np.float32)


class ClassMap:
    """Total map from 16-bit SemanticKITTI ids to :class:`KittiClass`."""

    def __init__(self, mapping=None):
        self._table = np.zeros(_ID_SPACE, dtype=np.uint8)
        self._mapping = {}
        for source_id, cls in (mapping or {}).items():
            source_id = int(source_id)
            if not 0 <= source_id < _ID_SPACE:
                raise InvalidConfig(f"semantic id {source_id} outside 16-bit range")
            self._table[source_id] = KittiClass(cls)
            self._mapping[source_id] = KittiClass(cls)
        self._table.setflags(write=False)

    @property
    def table(self):
        return self._table

    def as_dict(self):
        return dict(self._mapping)

    def __call__(self, semantic_ids):
        return self._table[np.asarray(semantic_ids, dtype=np.uint16)]

    @classmethod
    def parse(cls, text):
        mapping = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            src, sep, dst = line.partition("->")
            if not sep:
                raise InvalidConfig(f"class map line {lineno}: expected 'id -> class'")
            try:
                mapping[int(src)] = KittiClass.from_name(dst)
            except ValueError as exc:
                raise InvalidConfig(f"class map line {lineno}: {exc}") from None
        return cls(mapping)

    @classmethod
    def load(cls, path):
        return cls.parse(Path(path).read_text())

    @classmethod
    def default(cls):
        text = resources.files("segfuse").joinpath("configs/classmap.txt").read_text()
        return cls.parse(text)


def map_class(semantic_id, class_map):
    return KittiClass(int(class_map.table[int(semantic_id) & 0xFFFF]))


def one_hot(cls):
    return _EYE[int(cls)].copy()


def concat_sem_feature(labels, points, class_map):
    """Append the one-hot detection class of every point.

    ``labels`` is a :class:`~segfuse.kitti_io.SemanticLabels` or a plain
    array of semantic ids.
    """
    semantic = getattr(labels, "semantic", labels)
    semantic = np.asarray(semantic)
    points = np.asarray(points, dtype=np.float32)
    if len(semantic) != len(points):
        raise LengthMismatch(f"{len(points)} points but {len(semantic)} labels")
    out = np.empty((len(points), 4 + NUM_CLASSES), dtype=np.float32)
    out[:, :4] = points[:, :4]
    out[:, 4:] = _EYE[class_map(semantic)]
    return out


def softmax(scores):
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def concat_score_feature(scores, points):
    """Append softmax-normalized class scores to every point."""
    scores = np.asarray(scores)
    points = np.asarray(points, dtype=np.float32)
    if scores.ndim != 2 or scores.shape[1] != NUM_CLASSES:
        raise LengthMismatch(f"scores must be (N, {NUM_CLASSES}), got {scores.shape}")
    if len(scores) != len(points):
        raise LengthMismatch(f"{len(points)} points but {len(scores)} score rows")
    if not np.isfinite(scores).all():
        raise NonFiniteScore("class scores contain NaN or Inf")
    out = np.empty((len(points), 4 + NUM_CLASSES), dtype=np.float32)
    out[:, :4] = points[:, :4]
    out[:, 4:] = softmax(scores)
    return out


def strip_semantics(fused):
    return np.ascontiguousarray(np.asarray(fused)[:, :4])


def semantic_argmax(fused):
    return np.asarray(fused)[:, 4:8].argmax(axis=1)


def class_histogram(fused):
    """Points per detection class (argmax of the semantic block)."""
    return np.bincount(semantic_argmax(fused), minlength=NUM_CLASSES)
