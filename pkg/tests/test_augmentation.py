import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from segfuse import augmentation as aug
from segfuse.classes import KittiClass
from segfuse.errors import InvalidConfig
from segfuse.geometry import Box3D, bev_iou, canonical_transform, points_in_box

import synthetic


def scene_from(points, boxes):
    return aug.Scene.from_boxes(np.asarray(points, dtype=np.float64), boxes)


def fused_frame(rng, **kw):
    points, _, _, _, boxes = synthetic.frame(rng, **kw)
    sem = np.zeros((len(points), 4), np.float32)
    sem[:, 0] = 1
    return np.column_stack([points, sem]).astype(np.float32), boxes


def test_flip_example():
    s = scene_from([[1, 2, 3, 0.5]], [Box3D(1, 2, 3, 1, 1, 1, math.pi / 4, KittiClass.CAR)])
    f = aug.flip_x(s)
    assert f.points[0].tolist() == [1, -2, 3, 0.5]
    assert f.boxes[0, 1] == -2 and f.boxes[0, 6] == pytest.approx(-math.pi / 4)


def test_rotation_example():
    s = scene_from([[1, 0, 0, 0.2]], [Box3D(1, 0, 0, 1, 1, 1, 0.0, KittiClass.CAR)])
    r = aug.rotate_z(s, math.pi / 2)
    assert np.allclose(r.points[0, :3], [0, 1, 0], atol=1e-15)
    assert r.boxes[0, 6] == pytest.approx(math.pi / 2)
    assert r.points[0, 3] == 0.2


def test_scale_example():
    box = Box3D(1, 1, 1, 1, 1, 1, 0.3, KittiClass.CAR)
    s = aug.scale(scene_from([[1, 1, 1, 0]], [box]), 1.05)
    assert s.box(0).volume == pytest.approx(1.157625, abs=1e-12)
    assert s.boxes[0, 6] == 0.3
    with pytest.raises(InvalidConfig):
        aug.scale(s, 0.0)


def test_identity_transforms_are_exact():
    rng = np.random.default_rng(0)
    pts, boxes = fused_frame(rng)
    s = scene_from(pts, boxes)
    for out in (aug.rotate_z(s, 0.0), aug.scale(s, 1.0)):
        assert out.points.tobytes() == s.points.tobytes()
        assert out.boxes.tobytes() == s.boxes.tobytes()
    out, _ = aug.augment_scene(s, None, aug.AugmentConfig.identity(), rng)
    assert out.points.tobytes() == s.points.tobytes() and out.boxes.tobytes() == s.boxes.tobytes()


@given(st.floats(-math.pi, math.pi), st.floats(0.9, 1.1), st.booleans())
def test_global_transforms_keep_points_in_boxes(angle, factor, flip):
    rng = np.random.default_rng(1)
    pts, boxes = fused_frame(rng, n_ground=200, n_per_box=50)
    s = scene_from(pts, boxes)
    before = [points_in_box(s.points, b) for b in s.box_list()]
    t = aug.flip_x(s) if flip else s
    t = aug.scale(aug.rotate_z(t, angle), factor)
    after = [points_in_box(t.points, b) for b in t.box_list()]
    for a, b in zip(before, after):
        # only points right on a face can change membership
        assert np.count_nonzero(a != b) <= 1
    assert np.array_equal(t.points[:, 3:], s.points[:, 3:])


def test_sample_rejects_duplicate_of_existing_box():
    box = Box3D(10, 0, -0.95, 1.6, 1.5, 3.9, 0.0, KittiClass.CAR)
    db = aug.GtDatabase({KittiClass.CAR: [aug.GtEntry(box, np.zeros((5, 8), np.float32), "x")]})
    cfg = aug.AugmentConfig(sample_counts={KittiClass.CAR: 1})
    out, stats = aug.sample_gt(db, scene_from(np.zeros((3, 8)), [box]), cfg, np.random.default_rng(0))
    assert stats == {"placed": 0, "rejected": 1, "placed_points": 0}
    assert len(out.boxes) == 1 and len(out.points) == 3


def test_sample_places_and_counts_points():
    rng = np.random.default_rng(2)
    frames = [(f"{i}", *fused_frame(rng)) for i in range(4)]
    db = aug.build_gt_database(frames)
    pts, boxes = fused_frame(rng)
    scene = scene_from(pts, boxes)
    cfg = aug.AugmentConfig()
    out, stats = aug.sample_gt(db, scene, cfg, np.random.default_rng(3))
    assert len(out.points) == len(pts) + stats["placed_points"]
    assert len(out.boxes) == len(boxes) + stats["placed"]
    assert out.sampled.sum() == stats["placed"]
    bl = out.box_list()
    for i in range(len(bl)):
        for j in range(i + 1, len(bl)):
            if out.sampled[i] or out.sampled[j]:
                assert bev_iou(bl[i], bl[j]) == 0.0


def test_abutting_boxes_revert():
    a = Box3D(0, 0, 0, 2, 1.5, 4, 0.0, KittiClass.CAR)
    b = Box3D(4, 0, 0, 2, 1.5, 4, 0.0, KittiClass.CAR)
    pts = np.array([[0.5, 0.2, 0.1, 0], [4.5, -0.2, 0.1, 0]])
    s = scene_from(pts, [a, b])
    cfg = aug.AugmentConfig(box_rotation_range=(0.3, 0.3), box_translation_std=(0, 0, 0))
    out, stats = aug.per_box_augment(s, cfg, np.random.default_rng(0))
    assert stats == {"perturbed": 0, "reverted": 2}
    assert out.points.tobytes() == s.points.tobytes() and out.boxes.tobytes() == s.boxes.tobytes()


def test_per_box_is_rigid():
    rng = np.random.default_rng(5)
    pts, boxes = fused_frame(rng, n_max_boxes=3)
    s = scene_from(pts, boxes)
    out, stats = aug.per_box_augment(s, aug.AugmentConfig(), np.random.default_rng(7))
    assert stats["perturbed"] + stats["reverted"] == len(boxes)
    for i, box in enumerate(s.box_list()):
        inside = points_in_box(s.points, box)
        local_before = canonical_transform(s.points[inside, :3], box)
        local_after = canonical_transform(out.points[inside, :3], out.box(i))
        assert np.allclose(local_before, local_after, atol=1e-9)
    outside = ~np.any([points_in_box(s.points, b) for b in s.box_list()], axis=0)
    assert np.array_equal(out.points[outside], s.points[outside])


def test_augment_scene_deterministic_per_frame():
    rng = np.random.default_rng(6)
    db = aug.build_gt_database([(f"{i}", *fused_frame(rng)) for i in range(3)])
    pts, boxes = fused_frame(rng)
    s = scene_from(pts, boxes)
    cfg = aug.AugmentConfig()
    a, sa = aug.augment_scene(s, db, cfg, aug.frame_rng(0, "000001"))
    b, sb = aug.augment_scene(s, db, cfg, aug.frame_rng(0, "000001"))
    c, _ = aug.augment_scene(s, db, cfg, aug.frame_rng(0, "000002"))
    assert a.points.tobytes() == b.points.tobytes() and sa == sb
    assert a.points.tobytes() != c.points.tobytes()
    assert len(a.points) == len(pts) + sa["placed_points"]
    assert -math.pi / 4 <= sa["angle"] <= math.pi / 4 and 0.95 <= sa["scale"] <= 1.05


def test_frame_rng_independent_of_order():
    x = aug.frame_rng(3, "a").random(4)
    aug.frame_rng(3, "b").random(100)
    assert np.array_equal(aug.frame_rng(3, "a").random(4), x)
    assert not np.array_equal(aug.frame_rng(4, "a").random(4), x)


def test_gt_database_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    pts, boxes = fused_frame(rng)
    empty = Box3D(-50, 30, 0, 1, 1, 1, 0.0, KittiClass.PEDESTRIAN)
    db = aug.build_gt_database([("000007", pts, boxes + [empty])])
    assert len(db) == len(boxes) + 1
    assert any(len(e.points) == 0 for e in db.entries[KittiClass.PEDESTRIAN])
    db.save(tmp_path)
    back = aug.GtDatabase.load(tmp_path)
    assert len(back) == len(db)
    for cls in db.entries:
        for e, f in zip(db.entries[cls], back.entries[cls]):
            assert e.box.as_array().tolist() == f.box.as_array().tolist()
            assert e.points.tobytes() == f.points.tobytes() and f.frame_id == "000007"


def test_config_loading(tmp_path):
    cfg = aug.AugmentConfig.load()
    assert cfg == aug.AugmentConfig()
    with pytest.raises(InvalidConfig):
        aug.AugmentConfig.from_dict({"rotate": 1})
    with pytest.raises(InvalidConfig):
        aug.AugmentConfig(scale_range=(1.1, 0.9))
    p = tmp_path / "a.yaml"
    p.write_text("flip_prob: 0.0\nsample_counts: {Car: 3}\n")
    c = aug.AugmentConfig.load(p)
    assert c.flip_prob == 0.0 and c.sample_counts == {KittiClass.CAR: 3}
