"""Ground-truth sampling and geometric augmentation of fused scenes.

Scenes keep point geometry in float64 so repeated transforms do not lose
precision; columns from index 3 on (reflectance, semantic block) are never
touched by any transform here. Any sampled or perturbed box that would
overlap another box in bird's-eye view is reverted.
"""

from dataclasses import dataclass, field
import hashlib
from importlib import resources
import math
from pathlib import Path

import numpy as np
import yaml

from .classes import KittiClass
from .errors import InvalidConfig
from .geometry import Box3D, bev_iou, normalize_angle, points_in_box
from .kitti_io import parse_fused, write_fused


@dataclass
class Scene:
    points: np.ndarray  # (N, F) float64
    boxes: np.ndarray  # (M, 7) float64, x y z w h l yaw
    classes: np.ndarray  # (M,) int
    sampled: np.ndarray = None  # (M,) bool, True for boxes pasted from the database

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if self.sampled is None:
            self.sampled = np.zeros(len(self.boxes), dtype=bool)

    @classmethod
    def from_boxes(cls, points, boxes):
        arr = np.array([b.as_array() for b in boxes]).reshape(-1, 7)
        return cls(points, arr, [int(b.cls) for b in boxes])

    def box(self, i):
        return Box3D.from_array(self.boxes[i], self.classes[i])

    def box_list(self):
        return [self.box(i) for i in range(len(self.boxes))]

    def copy(self):
        return Scene(self.points.copy(), self.boxes.copy(), self.classes.copy(), self.sampled.copy())


@dataclass(frozen=True)
class AugmentConfig:
    rotation_range: tuple = (-math.pi / 4, math.pi / 4)
    scale_range: tuple = (0.95, 1.05)
    flip_prob: float = 0.5
    sample_counts: dict = field(default_factory=lambda: {
        KittiClass.CAR: 15, KittiClass.PEDESTRIAN: 10, KittiClass.CYCLIST: 10,
    })
    box_rotation_range: tuple = (-math.pi / 9, math.pi / 9)
    box_translation_std: tuple = (0.25, 0.25, 0.25)
    seed: int = 0

    def __post_init__(self):
        for name in ("rotation_range", "scale_range", "box_rotation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfig(f"{name} must be ordered, got {(lo, hi)}")
        if self.scale_range[0] <= 0:
            raise InvalidConfig("scale factors must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise InvalidConfig("flip_prob must be in [0, 1]")
        if any(s < 0 for s in self.box_translation_std):
            raise InvalidConfig("translation std must be non-negative")
        if any(int(n) < 0 for n in self.sample_counts.values()):
            raise InvalidConfig("sample counts must be non-negative")

    @classmethod
    def identity(cls, seed=0):
        return cls((0.0, 0.0), (1.0, 1.0), 0.0, {}, (0.0, 0.0), (0.0, 0.0, 0.0), seed)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown augment config keys {sorted(unknown)}")
        if "sample_counts" in d:
            d["sample_counts"] = {KittiClass.from_name(k): int(v) for k, v in (d["sample_counts"] or {}).items()}
        for key in ("rotation_range", "scale_range", "box_rotation_range", "box_translation_std"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)

    @classmethod
    def load(cls, path=None):
        if path is None:
            text = resources.files("segfuse").joinpath("configs/augment.yaml").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(yaml.safe_load(text))


def frame_seed_key(frame_id):
    return int.from_bytes(hashlib.sha256(str(frame_id).encode()).digest()[:8], "little")


def frame_rng(seed, frame_id):
    """Counter-based stream owned by one frame, independent of processing order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), frame_seed_key(frame_id)])))


@dataclass
class GtEntry:
    box: Box3D
    points: np.ndarray  # (K, F) float32, LiDAR frame
    frame_id: str


@dataclass
class GtDatabase:
    entries: dict = field(default_factory=dict)  # KittiClass -> list[GtEntry]

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def save(self, directory):
        """One ``.fused.bin`` per entry plus a tab-separated ``manifest.tsv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = ["file\tclass\tframe\tx\ty\tz\tw\th\tl\tyaw\tnum_points"]
        for cls in sorted(self.entries):
            for i, e in enumerate(self.entries[cls]):
                name = f"{KittiClass(cls).label_name}_{e.frame_id}_{i}.fused.bin"
                (directory / name).write_bytes(write_fused(e.points))
                vals = "\t".join(repr(float(v)) for v in e.box.as_array())
                rows.append(f"{name}\t{KittiClass(cls).label_name}\t{e.frame_id}\t{vals}\t{len(e.points)}")
        (directory / "manifest.tsv").write_text("\n".join(rows) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        db = cls()
        lines = (directory / "manifest.tsv").read_text().splitlines()[1:]
        for line in lines:
            if not line.strip():
                continue
            name, cname, frame, *vals, _ = line.split("\t")
            klass = KittiClass.from_name(cname)
            box = Box3D.from_array([float(v) for v in vals], klass)
            pts = parse_fused((directory / name).read_bytes())
            db.entries.setdefault(klass, []).append(GtEntry(box, pts, frame))
        return db


def build_gt_database(frames):
    """Crop the points of every labeled box.

    Args:
        frames: iterable of ``(frame_id, fused_points, boxes)``.
    """
    db = GtDatabase()
    for frame_id, points, boxes in frames:
        points = np.asarray(points, dtype=np.float32)
        for box in boxes:
            inside = points_in_box(points, box)
            db.entries.setdefault(KittiClass(box.cls), []).append(GtEntry(box, points[inside].copy(), str(frame_id)))
    return db


def collides(box, others):
    """True when ``box`` overlaps any of ``others`` in bird's-eye view."""
    return any(bev_iou(box, o) > 0.0 for o in others)


def sample_gt(db, scene, cfg, rng):
    """Paste database objects into the scene, rejecting any that collide.

    Returns ``(scene, stats)``; stats counts placed and rejected samples.
    """
    out = scene.copy()
    placed_boxes = out.box_list()
    new_points, new_boxes, new_classes = [], [], []
    stats = {"placed": 0, "rejected": 0, "placed_points": 0}
    for cls in sorted(cfg.sample_counts):
        pool = db.entries.get(KittiClass(cls), [])
        count = min(int(cfg.sample_counts[cls]), len(pool))
        if count == 0:
            continue
        for idx in rng.choice(len(pool), size=count, replace=False):
            entry = pool[int(idx)]
            if collides(entry.box, placed_boxes):
                stats["rejected"] += 1
                continue
            placed_boxes.append(entry.box)
            new_boxes.append(entry.box.as_array())
            new_classes.append(int(cls))
            new_points.append(np.asarray(entry.points, dtype=np.float64))
            stats["placed"] += 1
            stats["placed_points"] += len(entry.points)
    if new_boxes:
        out.points = np.concatenate([out.points] + new_points) if new_points else out.points
        out.boxes = np.concatenate([out.boxes, np.array(new_boxes)])
        out.classes = np.concatenate([out.classes, np.array(new_classes, dtype=np.int64)])
        out.sampled = np.concatenate([out.sampled, np.ones(len(new_boxes), dtype=bool)])
    return out, stats


def flip_x(scene):
    """Mirror about the x-z plane: y -> -y, yaw -> -yaw."""
    out = scene.copy()
    out.points[:, 1] = -out.points[:, 1]
    out.boxes[:, 1] = -out.boxes[:, 1]
    out.boxes[:, 6] = normalize_angle(-out.boxes[:, 6])
    return out


def global_flip_x(scene, rng, prob=0.5):
    if rng.random() < prob:
        return flip_x(scene), True
    return scene.copy(), False


def rotate_z(scene, angle):
    """Rotate points and boxes about the z axis through the origin."""
    out = scene.copy()
    if angle == 0.0:
        return out
    c, s = math.cos(angle), math.sin(angle)
    for arr in (out.points, out.boxes):
        x, y = arr[:, 0].copy(), arr[:, 1].copy()
        arr[:, 0] = c * x - s * y
        arr[:, 1] = s * x + c * y
    out.boxes[:, 6] = normalize_angle(out.boxes[:, 6] + angle)
    return out


def global_rotate(scene, rng, angle_range=(-math.pi / 4, math.pi / 4)):
    angle = float(rng.uniform(*angle_range))
    return rotate_z(scene, angle), angle


def scale(scene, factor):
    """Scale coordinates, box centers and box sizes; yaw is unchanged."""
    if factor <= 0:
        raise InvalidConfig("scale factor must be positive")
    out = scene.copy()
    if factor == 1.0:
        return out
    out.points[:, :3] *= factor
    out.boxes[:, :6] *= factor
    return out


def global_scale(scene, rng, scale_range=(0.95, 1.05)):
    factor = float(rng.uniform(*scale_range))
    return scale(scene, factor), factor


def per_box_augment(scene, cfg, rng):
    """Rigidly perturb each box together with its interior points.

    A perturbation whose box would overlap any other box is reverted.
    Returns ``(scene, stats)``.
    """
    out = scene.copy()
    stats = {"perturbed": 0, "reverted": 0}
    n = len(out.boxes)
    for i in range(n):
        d_yaw = float(rng.uniform(*cfg.box_rotation_range))
        d_xyz = rng.normal(0.0, 1.0, 3) * np.asarray(cfg.box_translation_std)
        if d_yaw == 0.0 and not d_xyz.any():
            continue
        old = out.box(i)
        new_arr = out.boxes[i].copy()
        new_arr[:3] += d_xyz
        new_arr[6] = normalize_angle(new_arr[6] + d_yaw)
        new = Box3D.from_array(new_arr, out.classes[i])
        others = [out.box(j) for j in range(n) if j != i]
        if collides(new, others):
            stats["reverted"] += 1
            continue
        inside = points_in_box(out.points, old)
        if inside.any():
            c, s = math.cos(d_yaw), math.sin(d_yaw)
            local = out.points[inside, :3] - old.center
            rotated = np.column_stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1], local[:, 2]])
            out.points[inside, :3] = rotated + old.center + d_xyz
        out.boxes[i] = new_arr
        stats["perturbed"] += 1
    return out, stats


def augment_scene(scene, db, cfg, rng):
    """Full pipeline: GT sampling, per-box noise, flip, rotation, scaling."""
    stats = {}
    if db is not None and cfg.sample_counts:
        scene, s = sample_gt(db, scene, cfg, rng)
        stats.update(s)
    scene, s = per_box_augment(scene, cfg, rng)
    stats.update(s)
    scene, stats["flipped"] = global_flip_x(scene, rng, cfg.flip_prob)
    scene, stats["angle"] = global_rotate(scene, rng, cfg.rotation_range)
    scene, stats["scale"] = global_scale(scene, rng, cfg.scale_range)
    return scene, stats
