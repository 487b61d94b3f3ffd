"""Synthetic KITTI-like frames for tests.

Objects are non-overlapping boxes on a ground plane in front of the sensor.
Points are sampled on the ground and inside each box; semantic ids follow
the default class map, and 4-class score logits put a clear margin on the
mapped class so label and score fusion agree on the argmax.
"""

import math
from pathlib import Path

import numpy as np

from segfuse import kitti_io
from segfuse.geometry import Box3D, bev_iou, inverse_canonical_transform
from segfuse.classes import KittiClass

P2 = np.array([[721.5377, 0.0, 609.5593, 44.85728],
               [0.0, 721.5377, 172.854, 0.2163791],
               [0.0, 0.0, 1.0, 0.002745884]])
TR = np.array([[0.0, -1.0, 0.0, 0.0],
               [0.0, 0.0, -1.0, -0.08],
               [1.0, 0.0, 0.0, -0.27]])

CALIB = kitti_io.Calibration(P2=P2, R0_rect=np.eye(3), Tr_velo_to_cam=TR)

SEMANTIC_ID = {KittiClass.UNLABELED: 40, KittiClass.CAR: 10, KittiClass.PEDESTRIAN: 30, KittiClass.CYCLIST: 31}
SIZES = {  # w, h, l
    KittiClass.CAR: (1.6, 1.5, 3.9),
    KittiClass.PEDESTRIAN: (0.6, 1.75, 0.8),
    KittiClass.CYCLIST: (0.6, 1.7, 1.75),
}
GROUND_Z = -1.7


def random_boxes(rng, n_max=6):
    boxes = []
    for _ in range(50):
        if len(boxes) >= n_max:
            break
        cls = KittiClass(int(rng.integers(1, 4)))
        w, h, l = SIZES[cls]
        box = Box3D(float(rng.uniform(6, 45)), float(rng.uniform(-12, 12)), GROUND_Z + h / 2,
                    w, h, l, float(rng.uniform(-math.pi, math.pi)), cls)
        if all(bev_iou(box, b) == 0.0 for b in boxes):
            boxes.append(box)
    return boxes


def frame(rng, n_ground=3000, n_per_box=200, n_max_boxes=6):
    """One frame: (points (N,4) float32, semantic ids, instance ids, logits (N,4), boxes)."""
    boxes = random_boxes(rng, n_max_boxes)
    ground = np.column_stack([
        rng.uniform(-20, 70, n_ground), rng.uniform(-40, 40, n_ground),
        np.full(n_ground, GROUND_Z) + rng.normal(0, 0.02, n_ground),
    ])
    parts, classes, instances = [ground], [np.zeros(n_ground, dtype=np.int64)], [np.zeros(n_ground, dtype=np.int64)]
    for i, box in enumerate(boxes):
        local = (rng.random((n_per_box, 3)) - 0.5) * np.array([box.l, box.w, box.h]) * 0.98
        parts.append(inverse_canonical_transform(local, box))
        classes.append(np.full(n_per_box, int(box.cls)))
        instances.append(np.full(n_per_box, i + 1))
    xyz = np.vstack(parts)
    cls = np.concatenate(classes)
    n = len(xyz)
    points = np.column_stack([xyz, rng.random(n)]).astype(np.float32)
    semantic = np.array([SEMANTIC_ID[KittiClass(c)] for c in range(4)])[cls].astype(np.uint16)
    logits = rng.uniform(-1, 1, (n, 4))
    logits[np.arange(n), cls] += 4.0
    return points, semantic, np.concatenate(instances).astype(np.uint16), logits.astype(np.float32), boxes


def box_object(box, calib=CALIB):
    obj = kitti_io.box_to_object(box, calib)
    obj.truncation, obj.occlusion = 0.0, 0
    return obj


def write_dataset(root, n_frames=3, seed=0, **frame_kwargs):
    """Write velodyne/, labels/, scores/, label_2/, calib/ under ``root``; returns frame ids."""
    root = Path(root)
    dirs = {name: root / name for name in ("velodyne", "labels", "scores", "label_2", "calib")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    stems = []
    for i in range(n_frames):
        stem = f"{i:06d}"
        points, semantic, instance, logits, boxes = frame(rng, **frame_kwargs)
        (dirs["velodyne"] / f"{stem}.bin").write_bytes(kitti_io.write_velodyne(points))
        (dirs["labels"] / f"{stem}.label").write_bytes(
            kitti_io.write_semantic_labels(kitti_io.SemanticLabels(semantic, instance)))
        (dirs["scores"] / f"{stem}.scores.bin").write_bytes(logits.astype("<f4").tobytes())
        objects = [box_object(b) for b in boxes]
        objects.append(kitti_io.GroundTruthObject("DontCare", -1.0, -1, -10.0, (10.0, 10.0, 40.0, 40.0),
                                                  (-1.0, -1.0, -1.0), (-1000.0, -1000.0, -1000.0), -10.0))
        (dirs["label_2"] / f"{stem}.txt").write_text(kitti_io.write_object_labels(objects))
        (dirs["calib"] / f"{stem}.txt").write_text(kitti_io.write_calibration(CALIB))
        stems.append(stem)
    return stems


def write_config(root, **extra):
    """Pipeline config pointing at a dataset written by :func:`write_dataset`."""
    import yaml

    cfg = {
        "velodyne_dir": "velodyne", "semantic_dir": "labels", "score_dir": "scores",
        "object_dir": "label_2", "calib_dir": "calib", "output_dir": "out",
    }
    cfg.update(extra)
    path = Path(root) / "pipeline.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


EVAL_DIMS = {"Car": (1.5, 1.6, 3.9), "Van": (2.2, 1.9, 5.0), "Pedestrian": (1.75, 0.6, 0.8),
             "Person_sitting": (1.2, 0.6, 0.8), "Cyclist": (1.7, 0.6, 1.75)}


def _label(rng, name, score=None, near=None):
    if near is None:
        h, w, l = EVAL_DIMS[name]
        loc = (float(rng.uniform(-10, 10)), float(rng.uniform(1.4, 1.8)), float(rng.uniform(5, 40)))
        ry = float(rng.uniform(-math.pi, math.pi))
    else:
        s = float(rng.choice([0.02, 0.1, 0.3]))
        h, w, l = (float(v * (1 + rng.normal(0, s / 4))) for v in near.dimensions)
        loc = tuple(float(v + rng.normal(0, s)) for v in near.location)
        ry = float(near.rotation_y + rng.normal(0, s))
    top = float(rng.uniform(100, 250))
    bbox = (float(rng.uniform(0, 1100)), top, 0.0, top + float(rng.uniform(15, 70)))
    bbox = (bbox[0], bbox[1], bbox[0] + float(rng.uniform(20, 120)), bbox[3])
    return kitti_io.GroundTruthObject(name, float(rng.choice([0.0, 0.1, 0.2, 0.4, 0.6])),
                                      int(rng.integers(0, 4)), 0.0, bbox, (h, w, l), loc, ry, score)


def eval_scenario(rng, n_frames=2, max_gt=10, max_det=20):
    """Random (det_frames, gt_frames) with near-miss, duplicate, neighbor-class and DontCare cases."""
    names = ["Car", "Car", "Van", "Pedestrian", "Person_sitting", "Cyclist"]
    det_frames, gt_frames = {}, {}
    for f in range(n_frames):
        gts = [_label(rng, str(rng.choice(names))) for _ in range(int(rng.integers(0, max_gt - 1)))]
        dc = kitti_io.GroundTruthObject("DontCare", -1.0, -1, -10.0, (500.0, 100.0, 700.0, 300.0),
                                        (-1.0, -1.0, -1.0), (-1000.0, -1000.0, -1000.0), -10.0)
        gts.append(dc)
        dets = []
        for _ in range(int(rng.integers(0, max_det + 1))):
            score = round(float(rng.random()), 1)  # coarse scores produce ties
            real = [g for g in gts if not g.is_dontcare]
            if real and rng.random() < 0.7:
                src = real[int(rng.integers(len(real)))]
                name = {"Van": "Car", "Person_sitting": "Pedestrian"}.get(src.class_name, src.class_name)
                if rng.random() < 0.1:
                    name = str(rng.choice(["Car", "Pedestrian", "Cyclist"]))
                d = _label(rng, name, score, near=src)
            else:
                d = _label(rng, str(rng.choice(["Car", "Pedestrian", "Cyclist"])), score)
            if rng.random() < 0.15:
                d.bbox2d = (520.0, 120.0, 600.0, 200.0)  # inside the DontCare region
            dets.append(d)
        det_frames[f"{f:06d}"] = dets
        gt_frames[f"{f:06d}"] = gts
    return det_frames, gt_frames
