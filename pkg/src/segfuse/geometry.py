"""Coordinate transforms, oriented boxes and rotated-box overlap.

Internal LiDAR convention: z up, yaw measured from +x about z, box center at
the geometric center. A box's length runs along its heading (local x), its
width along local y and its height along z.
"""

from dataclasses import dataclass, replace
import math

import numpy as np

from .classes import KittiClass

CLIP_EPS = 1e-9


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    yaw: float
    cls: KittiClass = KittiClass.CAR
    score: float = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.l > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w} h={self.h} l={self.l}")
        object.__setattr__(self, "yaw", float(normalize_angle(self.yaw)))

    @property
    def center(self):
        return np.array([self.x, self.y, self.z])

    @property
    def volume(self):
        return self.w * self.h * self.l

    def as_array(self):
        return np.array([self.x, self.y, self.z, self.w, self.h, self.l, self.yaw])

    @classmethod
    def from_array(cls, arr, box_cls=KittiClass.CAR, score=None):
        x, y, z, w, h, l, yaw = (float(v) for v in arr[:7])
        return cls(x, y, z, w, h, l, yaw, KittiClass(box_cls), score)

    def with_score(self, score):
        return replace(self, score=score)


def boxes_to_array(boxes):
    """Stack boxes into an (M, 7) float64 array."""
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


def normalize_angle(theta):
    """Wrap angles to (-pi, pi]. Identity on values already in range."""
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = theta - 2.0 * np.pi * np.floor((theta + np.pi) / (2.0 * np.pi))
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    # values inside the interval must come back bit-identical
    inside = (theta > -np.pi) & (theta <= np.pi)
    out = np.where(inside, theta, wrapped)
    return out if out.ndim else float(out)


def cart_to_cyl(xyz):
    """(x, y, z) -> (rho, phi, z); phi is 0 on the axis rho == 0."""
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    rho = np.hypot(x, y)
    phi = np.where(rho > 0, np.arctan2(y, x), 0.0)
    phi = np.where(phi == -np.pi, np.pi, phi)
    return np.stack([rho, phi, z], axis=-1)


def cyl_to_cart(cyl):
    cyl = np.asarray(cyl, dtype=np.float64)
    rho, phi, z = cyl[..., 0], cyl[..., 1], cyl[..., 2]
    if np.any(rho < 0):
        raise ValueError("rho must be non-negative")
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)


def lidar_to_rect(points, calib):
    """LiDAR frame -> rectified camera frame, (N, 3) -> (N, 3)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tr = np.asarray(calib.Tr_velo_to_cam, dtype=np.float64)
    cam = pts @ tr[:, :3].T + tr[:, 3]
    return cam @ np.asarray(calib.R0_rect, dtype=np.float64).T


def rect_to_lidar(points, calib):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = np.linalg.solve(np.asarray(calib.R0_rect, dtype=np.float64), pts.T).T
    tr = np.asarray(calib.Tr_velo_to_cam, dtype=np.float64)
    return np.linalg.solve(tr[:, :3], (cam - tr[:, 3]).T).T


def project_points(points, calib):
    """Project LiDAR points into the image of camera 2.

    Returns ``(uv, depth)`` where depth is the rectified-camera z. Pixel
    coordinates of points with depth <= 0 are NaN.
    """
    rect = lidar_to_rect(points, calib)
    hom = np.hstack([rect, np.ones((len(rect), 1))]) @ np.asarray(calib.P2, dtype=np.float64).T
    depth = rect[:, 2]
    uv = np.full((len(rect), 2), np.nan)
    front = depth > 0
    uv[front] = hom[front, :2] / hom[front, 2:3]
    return uv, depth


def project_lidar_to_image(p, calib):
    """Project one LiDAR point; returns (u, v, depth) or None when behind the camera."""
    uv, depth = project_points(np.asarray(p, dtype=np.float64)[None, :3], calib)
    if not depth[0] > 0:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def _rotz(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_corners(box):
    """Eight corners (8, 3): bottom face first, counter-clockwise seen from above."""
    hl, hw, hh = box.l / 2.0, box.w / 2.0, box.h / 2.0
    local = np.array([
        [hl, hw, -hh], [-hl, hw, -hh], [-hl, -hw, -hh], [hl, -hw, -hh],
        [hl, hw, hh], [-hl, hw, hh], [-hl, -hw, hh], [hl, -hw, hh],
    ])
    return local @ _rotz(box.yaw).T + box.center


def bev_footprint(box):
    """Footprint rectangle as a counter-clockwise list of (x, y) tuples."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.l / 2.0, box.w / 2.0
    out = []
    for lx, ly in ((hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)):
        out.append((box.x + c * lx - s * ly, box.y + s * lx + c * ly))
    return out


def polygon_area(poly):
    """Shoelace area of a simple polygon given as (x, y) tuples (positive if CCW)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_convex(subject, clip, eps=CLIP_EPS):
    """Sutherland-Hodgman: clip polygon ``subject`` by convex CCW polygon ``clip``."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        elen = math.hypot(ex, ey)

        def side(p):
            # signed distance to the edge line, positive on the inner (left) side
            return (ex * (p[1] - ay) - ey * (p[0] - ax)) / elen

        inp = output
        output = []
        prev = inp[-1]
        d_prev = side(prev)
        for cur in inp:
            d_cur = side(cur)
            if d_cur >= -eps:
                if d_prev < -eps:
                    output.append(_cut(prev, cur, d_prev, d_cur))
                output.append(cur)
            elif d_prev >= -eps:
                output.append(_cut(prev, cur, d_prev, d_cur))
            prev, d_prev = cur, d_cur
    return output


def _cut(p, q, dp, dq):
    t = dp / (dp - dq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a, b):
    fa, fb = bev_footprint(a), bev_footprint(b)
    # bounding-circle rejection
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.x - b.x, a.y - b.y) > ra + rb:
        return 0.0
    poly = clip_convex(fa, fb)
    area = polygon_area(poly)
    return area if area > 0.0 else 0.0


def bev_iou(a, b):
    """Rotated IoU of the two ground-plane footprints."""
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.w * a.l + b.w * b.l - inter
    return min(max(inter / union, 0.0), 1.0)


def z_overlap(a, b):
    lo = max(a.z - a.h / 2.0, b.z - b.h / 2.0)
    hi = min(a.z + a.h / 2.0, b.z + b.h / 2.0)
    return max(hi - lo, 0.0)


def iou_3d(a, b):
    dz = z_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_matrix(boxes_a, boxes_b, iou_fn=bev_iou):
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou_fn(a, b)
    return out


def canonical_transform(points, box):
    """Move ``box`` to the origin with its heading on +x. Extra columns pass through."""
    pts = np.array(points, dtype=np.float64, copy=True)
    shifted = pts[:, :3] - box.center
    pts[:, :3] = shifted @ _rotz(-box.yaw).T
    return pts


def inverse_canonical_transform(points, box):
    pts = np.array(points, dtype=np.float64, copy=True)
    pts[:, :3] = pts[:, :3] @ _rotz(box.yaw).T + box.center
    return pts


def points_in_box(points, box, eps=1e-6):
    """Boolean mask of points inside ``box`` (inclusive, padded by ``eps``)."""
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    local = canonical_transform(np.asarray(points)[:, :3], box)
    half = np.array([box.l, box.w, box.h]) / 2.0 + eps
    return np.all(np.abs(local) <= half, axis=1)
