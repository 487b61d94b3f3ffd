"""Quick end-to-end property checks run by ``segfuse selftest``.

Each check returns ``(ok, detail)``. The IoU function under test can be
swapped in so a deliberately broken implementation is caught.
"""

from dataclasses import dataclass
import math
import time

import numpy as np

from . import encoders, fusion, geometry, kitti_io, losses
from .classes import KittiClass
from .evaluation import EvalConfig, evaluate_benchmark


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _random_box(rng, cls=KittiClass.CAR):
    return geometry.Box3D(
        float(rng.uniform(-2, 2)), float(rng.uniform(-2, 2)), float(rng.uniform(-0.5, 0.5)),
        float(rng.uniform(0.5, 2.5)), float(rng.uniform(0.5, 2.5)), float(rng.uniform(0.5, 4.5)),
        float(rng.uniform(-math.pi, math.pi)), cls,
    )


def monte_carlo_iou(a, b, rng, samples=200_000):
    """BEV and 3D IoU estimated from uniform samples inside ``a``."""
    local = (rng.random((samples, 3)) - 0.5) * np.array([a.l, a.w, a.h])
    pts = geometry.inverse_canonical_transform(local, a)
    local_b = np.abs(geometry.canonical_transform(pts, b))
    in_bev = (local_b[:, 0] <= b.l / 2) & (local_b[:, 1] <= b.w / 2)
    inside = in_bev & (local_b[:, 2] <= b.h / 2)
    area_a, area_b = a.l * a.w, b.l * b.w
    inter_bev = in_bev.mean() * area_a
    inter_3d = inside.mean() * a.volume
    bev = inter_bev / (area_a + area_b - inter_bev)
    vol = inter_3d / (a.volume + b.volume - inter_3d)
    return bev, vol


def check_round_trips(rng):
    pts = rng.normal(0, 20, (500, 4)).astype(np.float32)
    pts[:, 3] = rng.random(500).astype(np.float32)
    if not np.array_equal(kitti_io.parse_velodyne(kitti_io.write_velodyne(pts)), pts):
        return False, "velodyne"
    fused = fusion.concat_score_feature(rng.normal(size=(500, 4)), pts)
    if kitti_io.write_fused(kitti_io.parse_fused(kitti_io.write_fused(fused))) != kitti_io.write_fused(fused):
        return False, "fused"
    labels = kitti_io.SemanticLabels(rng.integers(0, 65536, 200).astype(np.uint16),
                                     rng.integers(0, 65536, 200).astype(np.uint16))
    back = kitti_io.parse_semantic_labels(kitti_io.write_semantic_labels(labels))
    if not (np.array_equal(back.semantic, labels.semantic) and np.array_equal(back.instance, labels.instance)):
        return False, "semantic labels"
    calib = kitti_io.Calibration()
    dets = [_random_box(rng).with_score(float(rng.random())) for _ in range(20)]
    dets = [geometry.Box3D(d.x + 10, d.y, d.z, d.w, d.h, d.l, d.yaw, d.cls, d.score) for d in dets]
    parsed = kitti_io.parse_object_labels(kitti_io.write_detections(dets, calib))
    for d, o in zip(dets, parsed):
        b = kitti_io.object_to_box(o, calib)
        err = np.abs(b.as_array() - d.as_array())
        err[6] = abs(geometry.normalize_angle(b.yaw - d.yaw))
        if err.max() > 1e-4:
            return False, f"detection text (error {err.max():.2e})"
    xyz = rng.normal(0, 30, (1000, 3))
    cyl = geometry.cyl_to_cart(geometry.cart_to_cyl(xyz))
    if np.max(np.linalg.norm(cyl - xyz, axis=1) / np.maximum(np.linalg.norm(xyz, axis=1), 1e-12)) > 1e-6:
        return False, "cylindrical"
    for _ in range(100):
        gt, anchor = _random_box(rng), _random_box(rng)
        # the sine angle residual is only invertible within a quarter turn
        gt = geometry.Box3D(gt.x, gt.y, gt.z, gt.w, gt.h, gt.l, anchor.yaw + float(rng.uniform(-1.4, 1.4)))
        back = encoders.anchor_residual_decode(encoders.anchor_residual_encode(gt, anchor), anchor)
        diff = np.abs(back.as_array() - gt.as_array())
        diff[6] = abs(geometry.normalize_angle(back.yaw - gt.yaw))
        if diff.max() > 1e-6:
            return False, "anchor residual"
        p = rng.normal(0, 5, 3)
        t = p + rng.uniform(-2.9, 2.9, 3)
        bins, res = encoders.bin_encode_center(p, t)
        if np.abs(encoders.bin_decode_center(p, bins, res) - t).max() > 1e-9:
            return False, "bin encoding"
    return True, "velodyne, semantic, fused, detections, cylindrical, anchor, bin"


def check_iou(rng, iou_fn=None, bev_fn=None, pairs=40):
    iou_fn = iou_fn or geometry.iou_3d
    bev_fn = bev_fn or (geometry.bev_iou if iou_fn is geometry.iou_3d else None)
    worst = 0.0
    for _ in range(pairs):
        a, b = _random_box(rng), _random_box(rng)
        mc_bev, mc_3d = monte_carlo_iou(a, b, rng)
        worst = max(worst, abs(iou_fn(a, b) - mc_3d))
        if bev_fn is not None:
            worst = max(worst, abs(bev_fn(a, b) - mc_bev))
    sq = geometry.Box3D(0, 0, 0, 2, 1, 2, 0.0)
    rot = geometry.Box3D(0, 0, 0, 2, 1, 2, math.pi / 4)
    k = 2 * (math.sqrt(2) - 1)
    expected = k / (2 - k)
    worst = max(worst, abs(iou_fn(sq, rot) - expected))
    return worst <= 1e-2, f"max abs error {worst:.4f} over {pairs} pairs + 45 deg square"


def check_gradients(rng, trials=100):
    worst = 0.0
    for _ in range(trials):
        p = float(rng.uniform(0.05, 0.95))
        worst = max(worst, losses.relative_error(
            losses.focal_loss(p).grad, losses.numeric_grad(lambda x: losses.focal_loss(float(x)).value, p)))
        r = float(rng.uniform(-3, 3))
        if abs(abs(r) - 1.0) > 1e-3:
            worst = max(worst, losses.relative_error(
                losses.smooth_l1(r).grad, losses.numeric_grad(lambda x: losses.smooth_l1(float(x)).value, r)))
        z = rng.normal(size=2)
        t = int(rng.integers(2))
        worst = max(worst, losses.relative_error(
            losses.direction_loss(z, t).grad, losses.numeric_grad(lambda x: losses.direction_loss(x, t).value, z)))
        probs = fusion.softmax(rng.normal(size=(6, 4)))
        labels = rng.integers(0, 4, 6)
        w = rng.uniform(0.5, 2.0, 4)
        worst = max(worst, losses.relative_error(
            losses.weighted_cross_entropy_mean(probs, labels, w).grad,
            losses.numeric_grad(lambda x: losses.weighted_cross_entropy_mean(x, labels, w).value, probs)))
        worst = max(worst, losses.relative_error(
            losses.total_seg_loss(probs, labels, w).grad,
            losses.numeric_grad(lambda x: losses.total_seg_loss(x, labels, w).value, probs)))
    focal = losses.focal_loss(0.3, alpha=1.0, gamma=0.0).value
    ok = worst < 1e-4 and abs(focal + math.log(0.3)) <= 1e-12
    return ok, f"max relative error {worst:.2e}"


def check_ap(rng):
    def obj(name, x, z, score=None):
        return kitti_io.GroundTruthObject(name, 0.0, 0, 0.0, (100.0, 100.0, 200.0, 180.0),
                                          (1.5, 1.6, 3.9), (x, 1.0, z), 0.3, score)

    gt = {f"{i:06d}": [obj("Car", float(rng.uniform(-10, 10)), 20.0 + 8 * j) for j in range(3)]
          + [obj("Pedestrian", -3.0, 12.0), obj("Cyclist", 4.0, 15.0)] for i in range(4)}
    perfect = {k: [kitti_io.GroundTruthObject(**{**o.__dict__, "score": 0.5}) for o in v] for k, v in gt.items()}
    empty = {k: [] for k in gt}
    cfg = EvalConfig()
    full = evaluate_benchmark(perfect, gt, cfg)
    none = evaluate_benchmark(empty, gt, cfg)
    values_full = [c.ap40 for c in full.cells.values()] + [c.ap11 for c in full.cells.values()]
    values_none = [c.ap40 for c in none.cells.values()] + [c.ap11 for c in none.cells.values()]
    # one GT, a false positive ranked above the true positive: precision 1/2 at every recall sample
    one = {"a": [obj("Car", 0.0, 20.0)]}
    dets = {"a": [obj("Car", 0.0, 20.0, 0.4), obj("Car", 5.0, 40.0, 0.9)]}
    half = evaluate_benchmark(dets, one, cfg).ap(KittiClass.CAR, 0, "3d")
    ok = all(v == 100.0 for v in values_full) and all(v == 0.0 for v in values_none) and half == 50.0
    return ok, f"perfect {min(values_full):.1f}, empty {max(values_none):.1f}, ranked FP {half:.1f}"


def check_encoders(rng):
    cfg = encoders.load_grid_configs()["pillar"]
    n = 20000
    pts = np.column_stack([rng.uniform(0, 69, n), rng.uniform(-39, 39, n), rng.uniform(-3, 1, n), rng.random(n)])
    fused = fusion.concat_sem_feature(rng.integers(0, 300, n), pts.astype(np.float32), fusion.ClassMap.default())
    a = encoders.pillarize(fused, cfg, np.random.default_rng(1))
    b = encoders.pillarize(fused, cfg, np.random.default_rng(1))
    if not np.array_equal(a.data, b.data):
        return False, "pillarize not deterministic"
    retained = a.stats["retained"]
    if int(a.counts.sum()) != retained or a.stats["input"] != retained + sum(
            v for k, v in a.stats.items() if k.startswith("dropped")):
        return False, "point accounting"
    return True, f"{a.num_pillars} pillars, {retained} points retained"


def run_selftest(iou_fn=None, seed=0, out=print):
    """Run every check, print a table and return the list of results."""
    checks = [
        ("round-trips", lambda r: check_round_trips(r)),
        ("rotated IoU oracle", lambda r: check_iou(r, iou_fn)),
        ("gradient checks", lambda r: check_gradients(r)),
        ("AP oracle", lambda r: check_ap(r)),
        ("encoder invariants", lambda r: check_encoders(r)),
    ]
    results = []
    for name, fn in checks:
        start = time.perf_counter()
        try:
            ok, detail = fn(np.random.default_rng(seed))
        except Exception as exc:  # a crash is a failed check, not an aborted run
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - start))
    width = max(len(r.name) for r in results)
    for r in results:
        out(f"{r.name:<{width}}  {'PASS' if r.ok else 'FAIL'}  {r.seconds:6.2f}s  {r.detail}")
    out(f"{sum(r.ok for r in results)}/{len(results)} checks passed")
    return results
