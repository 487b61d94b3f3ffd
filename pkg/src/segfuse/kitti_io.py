"""Readers and writers for the on-disk formats of the pipeline.

Velodyne scans are N x 4 little-endian float32 (x, y, z, reflectance),
semantic labels N x uint32 (instance << 16 | semantic), fused clouds
N x 8 float32, and object labels / detections KITTI label text.
"""

from dataclasses import dataclass, field
import logging
import math
from pathlib import Path

import numpy as np

from .classes import KittiClass, class_from_label_name
from .errors import (
    MalformedLine,
    MalformedMatrix,
    MissingKey,
    MissingScore,
    NonFiniteValue,
    TruncatedFile,
)
from .geometry import Box3D, box_corners, lidar_to_rect, normalize_angle, rect_to_lidar

log = logging.getLogger(__name__)

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")

POINT_WIDTH = 4
FUSED_WIDTH = 8


def _decode_f32(data, width):
    data = bytes(data)
    stride = 4 * width
    if len(data) % stride:
        raise TruncatedFile(
            f"length {len(data)} is not a multiple of {stride}", position=len(data) - len(data) % stride
        )
    values = np.frombuffer(data, dtype=_F32).reshape(-1, width)
    bad = ~np.isfinite(values)
    if bad.any():
        flat = int(np.flatnonzero(bad.ravel())[0])
        raise NonFiniteValue("non-finite value", position=4 * flat)
    return values.astype(np.float32)


def _encode_f32(values, width):
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"expected an (N, {width}) array, got shape {arr.shape}")
    arr = arr.astype(_F32)
    bad = ~np.isfinite(arr)
    if bad.any():
        flat = int(np.flatnonzero(bad.ravel())[0])
        raise NonFiniteValue("non-finite value", position=4 * flat)
    return arr.tobytes()


def clamp_reflectance(points):
    """Clamp column 3 into [0, 1]; returns (points, number of clamped values)."""
    r = points[:, 3]
    out_of_range = (r < 0) | (r > 1)
    n = int(out_of_range.sum())
    if n:
        points = points.copy()
        np.clip(points[:, 3], 0.0, 1.0, out=points[:, 3])
    return points, n


def parse_velodyne(data):
    """Decode a KITTI ``.bin`` scan into an (N, 4) float32 array."""
    points = _decode_f32(data, POINT_WIDTH)
    points, n_clamped = clamp_reflectance(points)
    if n_clamped:
        log.warning("clamped %d reflectance values outside [0, 1]", n_clamped)
    return points


def write_velodyne(points):
    return _encode_f32(points, POINT_WIDTH)


def parse_fused(data):
    return _decode_f32(data, FUSED_WIDTH)


def write_fused(fused):
    """Serialize an (N, 8) fused cloud, point-major float32 little-endian."""
    return _encode_f32(fused, FUSED_WIDTH)


def parse_scores(data, width=4):
    """Per-point class scores, stored like scans as N x ``width`` float32."""
    data = bytes(data)
    if len(data) % (4 * width):
        raise TruncatedFile(f"length {len(data)} is not a multiple of {4 * width}")
    return np.frombuffer(data, dtype=_F32).reshape(-1, width).astype(np.float32)


@dataclass(frozen=True)
class SemanticLabels:
    """Index-aligned semantic (low 16 bits) and instance (high 16 bits) ids."""

    semantic: np.ndarray
    instance: np.ndarray

    def __len__(self):
        return len(self.semantic)


def parse_semantic_labels(data):
    data = bytes(data)
    if len(data) % 4:
        raise TruncatedFile(f"length {len(data)} is not a multiple of 4", position=len(data) - len(data) % 4)
    words = np.frombuffer(data, dtype=_U32)
    return SemanticLabels(
        semantic=(words & 0xFFFF).astype(np.uint16),
        instance=(words >> 16).astype(np.uint16),
    )


def write_semantic_labels(labels):
    words = labels.semantic.astype(np.uint32) | (labels.instance.astype(np.uint32) << 16)
    return words.astype(_U32).tobytes()


@dataclass
class GroundTruthObject:
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple
    dimensions: tuple  # (h, w, l)
    location: tuple  # camera frame, bottom-face center
    rotation_y: float
    score: float = None

    @property
    def is_dontcare(self):
        return self.class_name == "DontCare"

    @property
    def bbox_height(self):
        return self.bbox2d[3] - self.bbox2d[1]


def _number(token, lineno, what):
    try:
        value = float(token)
    except ValueError:
        raise MalformedLine(f"non-numeric {what} field {token!r}", position=lineno) from None
    if not math.isfinite(value):
        raise MalformedLine(f"non-finite {what} field {token!r}", position=lineno)
    return value


def parse_object_labels(text):
    """Parse KITTI label text (15 fields per line, 16 with a trailing score)."""
    objects = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise MalformedLine(f"expected 15 or 16 fields, got {len(fields)}", position=lineno)
        nums = [_number(tok, lineno, "numeric") for tok in fields[1:]]
        if nums[1] != int(nums[1]):
            raise MalformedLine(f"occlusion must be an integer, got {fields[2]!r}", position=lineno)
        objects.append(GroundTruthObject(
            class_name=fields[0],
            truncation=nums[0],
            occlusion=int(nums[1]),
            alpha=nums[2],
            bbox2d=tuple(nums[3:7]),
            dimensions=tuple(nums[7:10]),
            location=tuple(nums[10:13]),
            rotation_y=nums[13],
            score=nums[14] if len(nums) == 15 else None,
        ))
    return objects


def format_object(obj):
    parts = [
        obj.class_name,
        f"{obj.truncation:.2f}",
        str(int(obj.occlusion)),
        f"{obj.alpha:.6f}",
        *(f"{v:.2f}" for v in obj.bbox2d),
        *(f"{v:.6f}" for v in obj.dimensions),
        *(f"{v:.6f}" for v in obj.location),
        f"{obj.rotation_y:.6f}",
    ]
    if obj.score is not None:
        parts.append(f"{obj.score:.6f}")
    return " ".join(parts)


def write_object_labels(objects):
    return "".join(format_object(o) + "\n" for o in objects)


@dataclass
class Calibration:
    P2: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))
    R0_rect: np.ndarray = field(default_factory=lambda: np.eye(3))
    Tr_velo_to_cam: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))


_CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def _check_orthonormal(name, rot, tol=1e-3):
    err = np.abs(rot @ rot.T - np.eye(3)).max()
    if err > tol:
        raise MalformedMatrix(f"{name} rotation is not orthonormal (max deviation {err:.2e})")


def parse_calibration(text):
    rows = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key in _CALIB_KEYS:
            rows[key] = (lineno, rest.split())
    matrices = {}
    for key, shape in _CALIB_KEYS.items():
        if key not in rows:
            raise MissingKey(f"calibration key {key!r} not found")
        lineno, tokens = rows[key]
        if len(tokens) != shape[0] * shape[1]:
            raise MalformedMatrix(
                f"{key} needs {shape[0] * shape[1]} values, got {len(tokens)}", position=lineno
            )
        try:
            values = [float(t) for t in tokens]
        except ValueError:
            raise MalformedMatrix(f"{key} has a non-numeric entry", position=lineno) from None
        matrices[key] = np.array(values).reshape(shape)
    _check_orthonormal("R0_rect", matrices["R0_rect"])
    _check_orthonormal("Tr_velo_to_cam", matrices["Tr_velo_to_cam"][:, :3])
    return Calibration(**matrices)


def write_calibration(calib):
    lines = []
    for key in _CALIB_KEYS:
        values = np.asarray(getattr(calib, key)).ravel()
        lines.append(f"{key}: " + " ".join(repr(float(v)) for v in values))
    return "\n".join(lines) + "\n"


# Box conversions between the LiDAR frame and KITTI camera labels. The yaw
# relation yaw = -(rotation_y + pi/2) assumes the usual KITTI axis alignment
# (camera x = -LiDAR y, camera y = -LiDAR z) and is an exact bijection.

def object_to_box(obj, calib=None):
    """Convert a camera-frame label to a LiDAR-frame :class:`Box3D`.

    Without a calibration the nominal KITTI axis permutation is used, which is
    a proper rigid motion, so IoU values are unaffected.
    """
    h, w, l = obj.dimensions
    x, y, z = obj.location
    center_rect = np.array([[x, y - h / 2.0, z]])
    if calib is None:
        center = np.array([center_rect[0, 2], -center_rect[0, 0], -center_rect[0, 1]])
    else:
        center = rect_to_lidar(center_rect, calib)[0]
    cls = class_from_label_name(obj.class_name) or KittiClass.UNLABELED
    yaw = normalize_angle(-(obj.rotation_y + math.pi / 2.0))
    return Box3D(*(float(v) for v in center), w, h, l, yaw, cls, obj.score)


def box_to_object(box, calib=None, class_name=None):
    """Inverse of :func:`object_to_box`; fills alpha and the projected 2D box."""
    if calib is None:
        center_rect = np.array([-box.y, -box.z, box.x])
    else:
        center_rect = lidar_to_rect(box.center[None, :], calib)[0]
    loc = (float(center_rect[0]), float(center_rect[1] + box.h / 2.0), float(center_rect[2]))
    ry = float(normalize_angle(-box.yaw - math.pi / 2.0))
    alpha = float(normalize_angle(ry - math.atan2(loc[0], loc[2])))
    bbox = (0.0, 0.0, 0.0, 0.0)
    if calib is not None:
        rect = lidar_to_rect(box_corners(box), calib)
        front = rect[:, 2] > 0
        if front.any():
            hom = np.hstack([rect[front], np.ones((int(front.sum()), 1))]) @ np.asarray(calib.P2).T
            uv = hom[:, :2] / hom[:, 2:3]
            bbox = (float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))
    name = class_name or KittiClass(box.cls).label_name
    return GroundTruthObject(name, -1.0, -1, alpha, bbox, (box.h, box.w, box.l), loc, ry, box.score)


def write_detections(dets, calib):
    """KITTI submission text for scored LiDAR-frame boxes (16 fields per line)."""
    lines = []
    for i, det in enumerate(dets):
        if det.score is None or not math.isfinite(det.score):
            raise MissingScore(f"detection {i} has no finite score")
        lines.append(format_object(box_to_object(det, calib)))
    return "".join(line + "\n" for line in lines)


def pair_frames(*dirs_and_suffixes):
    """Stems present in every ``(directory, suffix)`` pair, sorted.

    Also returns, per pair, the stems found only there.
    """
    found = []
    for directory, suffix in dirs_and_suffixes:
        directory = Path(directory)
        stems = {p.name[: -len(suffix)] for p in directory.glob(f"*{suffix}")}
        found.append(stems)
    common = set.intersection(*found) if found else set()
    missing = [sorted(s - common) for s in found]
    return sorted(common), missing
