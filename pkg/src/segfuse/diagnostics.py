"""Camera-projection mismatch diagnostics.

A label image is painted from the points themselves with the true
calibration (nearest point wins each pixel). The same points are then
projected through a perturbed LiDAR-to-camera transform and read back from
that image. A point whose read-back label differs from its own label counts
as a flip, which is the failure mode of image-space segmentation painted
onto a cloud.
"""

from dataclasses import dataclass, replace
import math

import numpy as np

from .geometry import project_points

IMAGE_SIZE = (1242, 375)  # width, height


@dataclass
class ProjectionReport:
    num_points: int
    behind: int  # depth <= 0 under the true calibration
    in_image: int  # projected inside the image under the true calibration
    visible: int  # own their pixel in the z-buffer
    compared: int  # visible points still inside the image after jitter
    flips: int
    covered_pixels: int

    @property
    def in_image_fraction(self):
        return self.in_image / self.num_points if self.num_points else 0.0

    @property
    def flip_rate(self):
        return self.flips / self.compared if self.compared else 0.0


def _rotation(axis, angle):
    """Rodrigues rotation; exactly the identity for angle 0."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def jitter_calibration(calib, rotation, translation, rng):
    """Perturb Tr_velo_to_cam by a rotation (rad) and translation (m).

    Directions come from ``rng``; only the magnitudes are the arguments, so
    the same rng state gives a family of perturbations along one direction.
    """
    axis = rng.normal(size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    tr = np.asarray(calib.Tr_velo_to_cam, dtype=np.float64)
    if rotation == 0.0 and translation == 0.0:
        return replace(calib, Tr_velo_to_cam=tr.copy())
    rot = _rotation(axis, rotation)
    out = np.empty_like(tr)
    out[:, :3] = rot @ tr[:, :3]
    out[:, 3] = rot @ tr[:, 3] + translation * direction
    return replace(calib, Tr_velo_to_cam=out)


def _pixels(uv, depth, image_size):
    w, h = image_size
    ok = depth > 0
    with np.errstate(invalid="ignore"):
        ok &= (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    pix = np.full(len(uv), -1, dtype=np.int64)
    cols = np.floor(uv[ok, 0]).astype(np.int64)
    rows = np.floor(uv[ok, 1]).astype(np.int64)
    pix[ok] = rows * w + cols
    return pix, ok


def label_image(points, labels, calib, image_size=IMAGE_SIZE):
    """Z-buffered label image (flat, -1 where empty).

    Returns ``(image, pixel, owner, depth, in_view)`` where ``owner`` marks
    the point that won each pixel.
    """
    uv, depth = project_points(np.asarray(points)[:, :3], calib)
    pix, ok = _pixels(uv, depth, image_size)
    image = np.full(image_size[0] * image_size[1], -1, dtype=np.int64)
    owner = np.full(len(points), False)
    idx = np.flatnonzero(ok)
    if len(idx):
        # nearest first; stable so equal depths keep the lower index
        idx = idx[np.argsort(depth[idx], kind="stable")]
        _, first = np.unique(pix[idx], return_index=True)
        winners = idx[first]
        image[pix[winners]] = np.asarray(labels)[winners]
        owner[winners] = True
    return image, pix, owner, depth, ok


def projection_flip_report(points, labels, calib, rotation=0.0, translation=0.0, rng=None,
                           image_size=IMAGE_SIZE):
    """Label-flip statistics of ``points`` under one calibration perturbation."""
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = np.asarray(labels)
    image, _, owner, depth, in_view = label_image(points, labels, calib, image_size)
    jittered = jitter_calibration(calib, rotation, translation, rng)
    uv, jdepth = project_points(np.asarray(points)[owner, :3], jittered)
    pix, ok = _pixels(uv, jdepth, image_size)
    painted = np.maximum(image[pix[ok]], 0)  # an empty pixel reads back as unlabeled
    flips = int(np.count_nonzero(painted != labels[owner][ok]))
    return ProjectionReport(
        num_points=len(labels),
        behind=int(np.count_nonzero(depth <= 0)),
        in_image=int(in_view.sum()),
        visible=int(owner.sum()),
        compared=int(ok.sum()),
        flips=flips,
        covered_pixels=int(np.count_nonzero(image >= 0)),
    )


def flip_rate_curve(points, labels, calib, magnitudes, seed=0, image_size=IMAGE_SIZE):
    """Reports for several (rotation, translation) magnitudes along one seeded direction."""
    out = []
    for rotation, translation in magnitudes:
        rng = np.random.default_rng(seed)
        out.append(projection_flip_report(points, labels, calib, rotation, translation, rng, image_size))
    return out
