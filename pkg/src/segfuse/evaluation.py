"""KITTI-style 3D / BEV average-precision evaluation.

Detections are matched greedily in descending score order (ties keep input
order). A detection that lands on a ground truth outside the evaluated
difficulty bucket, or mostly inside a DontCare region, counts as neither a
true nor a false positive.
"""

from dataclasses import dataclass, field
from enum import IntEnum
import math

import numpy as np

from .classes import DETECTION_CLASSES, KittiClass
from .errors import FrameMismatch, NoGroundTruth
from .geometry import bev_iou, iou_3d
from .kitti_io import object_to_box


class Difficulty(IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3


# (min bbox height px, max occlusion, max truncation)
DIFFICULTY_LIMITS = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}
BUCKETS = (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD)

TP, FP, IGNORE = 1, 0, -1

METRICS = {"3d": iou_3d, "bev": bev_iou}


def assign_difficulty(obj):
    """Easiest bucket whose height / occlusion / truncation limits the object meets."""
    height = obj.bbox2d[3] - obj.bbox2d[1]
    for level in BUCKETS:
        min_h, max_occ, max_trunc = DIFFICULTY_LIMITS[level]
        if height >= min_h and obj.occlusion <= max_occ and obj.truncation <= max_trunc:
            return level
    return Difficulty.IGNORED


def _area2d(b):
    return max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)


def dontcare_overlap(det_box2d, dc_box2d):
    """Fraction of the detection's 2D box covered by a DontCare box."""
    w = min(det_box2d[2], dc_box2d[2]) - max(det_box2d[0], dc_box2d[0])
    h = min(det_box2d[3], dc_box2d[3]) - max(det_box2d[1], dc_box2d[1])
    area = _area2d(det_box2d)
    if w <= 0 or h <= 0 or area <= 0:
        return 0.0
    return w * h / area


@dataclass
class MatchResult:
    status: np.ndarray  # per detection, input order: TP, FP or IGNORE
    gt_matched: np.ndarray  # per ground truth


def score_order(scores):
    """Indices sorting ``scores`` descending; equal scores keep input order."""
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def match_detections(scores, ious, threshold, gt_ignored=None, dontcare_cover=None):
    """Greedy one-to-one matching.

    Args:
        scores: detection scores, length D.
        ious: (D, G) overlap of every detection with every ground truth.
        threshold: minimum IoU for a match (inclusive).
        gt_ignored: G booleans; matches to these are neither TP nor FP.
        dontcare_cover: D values, the largest DontCare coverage of each
            detection's 2D box. Unmatched detections with coverage at or
            above ``threshold`` are neither TP nor FP.
    """
    n_det = len(scores)
    ious = np.asarray(ious, dtype=np.float64)
    n_gt = ious.shape[1] if ious.ndim == 2 else len(gt_ignored if gt_ignored is not None else ())
    ious = ious.reshape(n_det, n_gt)
    gt_ignored = np.zeros(n_gt, dtype=bool) if gt_ignored is None else np.asarray(gt_ignored, dtype=bool)
    status = np.full(n_det, FP, dtype=np.int8)
    matched = np.zeros(n_gt, dtype=bool)
    for d in score_order(scores):
        best, best_iou = -1, -1.0
        for g in range(n_gt):
            if not matched[g] and ious[d, g] >= threshold and ious[d, g] > best_iou:
                best, best_iou = g, ious[d, g]
        if best >= 0:
            matched[best] = True
            status[d] = IGNORE if gt_ignored[best] else TP
        elif dontcare_cover is not None and dontcare_cover[d] >= threshold:
            status[d] = IGNORE
    return MatchResult(status, matched)


@dataclass
class PRCurve:
    scores: np.ndarray
    tp: np.ndarray  # cumulative true positives per prefix
    fp: np.ndarray  # cumulative false positives per prefix
    num_gt: int

    @property
    def recall(self):
        return self.tp / self.num_gt

    @property
    def precision(self):
        return self.tp / np.maximum(self.tp + self.fp, 1)


def pr_curve(scores, is_tp, num_gt):
    """Precision/recall at every prefix of the score-sorted detections.

    ``scores`` and ``is_tp`` list counted detections only (ignored ones
    removed), pooled over all frames.
    """
    if num_gt <= 0:
        raise NoGroundTruth("no ground truth in this bucket")
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    hits = is_tp[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    return PRCurve(scores[order], tp.astype(np.int64), fp.astype(np.int64), int(num_gt))


def average_precision(curve, num_points=40):
    """Interpolated AP in percent.

    ``num_points=40`` samples recall at i/40 for i = 1..40; ``num_points=11``
    samples 0, 0.1, ..., 1. At each sample the precision is the maximum over
    all prefixes whose recall reaches it (0 when none does).
    """
    if num_points == 40:
        samples = [(i, 40) for i in range(1, 41)]
    elif num_points == 11:
        samples = [(i, 10) for i in range(0, 11)]
    else:
        raise ValueError("num_points must be 40 or 11")
    if len(curve.tp) == 0:
        return 0.0
    tp, fp, n = curve.tp, curve.fp, curve.num_gt
    precision = tp / (tp + fp)
    # suffix maximum of precision
    best_after = np.maximum.accumulate(precision[::-1])[::-1]
    reached = []
    for num, den in samples:
        # first prefix with tp / n >= num / den, compared in integers
        reach = np.flatnonzero(tp * den >= num * n)
        if len(reach):
            reached.append(float(best_after[reach[0]]))
    # exactly rounded sum, so the result does not depend on summation order
    return math.fsum(reached) / len(samples) * 100.0


@dataclass
class EvalConfig:
    thresholds: dict = field(default_factory=lambda: {
        KittiClass.CAR: 0.7, KittiClass.PEDESTRIAN: 0.5, KittiClass.CYCLIST: 0.5,
    })
    # label types that are ignored rather than counted as misses
    neighbors: dict = field(default_factory=lambda: {
        KittiClass.CAR: ("Van",), KittiClass.PEDESTRIAN: ("Person_sitting",), KittiClass.CYCLIST: (),
    })
    classes: tuple = DETECTION_CLASSES


@dataclass
class CellResult:
    num_gt: int
    curve: PRCurve = None
    ap40: float = float("nan")
    ap11: float = float("nan")


@dataclass
class EvalReport:
    cells: dict  # (KittiClass, Difficulty, metric) -> CellResult

    def ap(self, cls, difficulty, metric="3d", num_points=40):
        cell = self.cells[(KittiClass(cls), Difficulty(difficulty), metric)]
        return cell.ap40 if num_points == 40 else cell.ap11

    def table(self, metric, num_points=40):
        return [[self.ap(c, d, metric, num_points) for d in BUCKETS] for c in self._classes()]

    def _classes(self):
        seen = []
        for c, _, _ in self.cells:
            if c not in seen:
                seen.append(c)
        return seen

    def to_tsv(self, name="result"):
        header = ["name", "metric", "interp"] + [
            f"{c.label_name}_{d.name.title()}" for c in self._classes() for d in BUCKETS
        ]
        lines = ["\t".join(header)]
        for metric in METRICS:
            for pts in (40, 11):
                row = [v for r in self.table(metric, pts) for v in r]
                lines.append("\t".join([name, metric, f"R{pts}"] + [_fmt(v) for v in row]))
        return "\n".join(lines) + "\n"

    def to_text(self, name="result"):
        classes = self._classes()
        out = []
        for metric in METRICS:
            for pts in (40, 11):
                title = f"AP_{metric.upper()} (R{pts})"
                out.append(f"{title:<24}" + "".join(f"{c.label_name:<27}" for c in classes))
                out.append(" " * 24 + "".join(f"{'Easy':<9}{'Moderate':<9}{'Hard':<9}" for _ in classes))
                row = "".join(f"{_fmt(v):<9}" for r in self.table(metric, pts) for v in r)
                out.append(f"{name:<24}" + row)
                out.append("")
        return "\n".join(out)


def _fmt(v):
    return "nan" if math.isnan(v) else f"{v:.2f}"


def read_report_tsv(text):
    """Parse :meth:`EvalReport.to_tsv` output into {(metric, interp): {column: value}}."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split("\t")
    rows = {}
    for line in lines[1:]:
        parts = line.split("\t")
        rows[(parts[1], parts[2])] = {h: float(v) for h, v in zip(header[3:], parts[3:])}
    return rows


def delta_tsv(current, baseline, name="delta"):
    """Column-wise difference of two report TSVs (current - baseline)."""
    cur, base = read_report_tsv(current), read_report_tsv(baseline)
    header = None
    lines = []
    for key, cols in cur.items():
        if key not in base:
            continue
        if header is None:
            header = list(cols)
            lines.append("\t".join(["name", "metric", "interp"] + header))
        lines.append("\t".join([name, key[0], key[1]] + [_fmt(cols[h] - base[key][h]) for h in header]))
    return "\n".join(lines) + "\n"


def _frame_entries(objects, cls, cfg):
    """Split one frame's objects into the pieces needed for class ``cls``."""
    gts, gt_diff, gt_neighbor, dontcare = [], [], [], []
    for obj in objects:
        if obj.is_dontcare:
            dontcare.append(obj.bbox2d)
        elif obj.class_name == cls.label_name or obj.class_name in cfg.neighbors.get(cls, ()):
            gts.append(object_to_box(obj))
            gt_diff.append(assign_difficulty(obj))
            gt_neighbor.append(obj.class_name != cls.label_name)
    return gts, np.array(gt_diff, dtype=np.int64), np.array(gt_neighbor, dtype=bool), dontcare


def evaluate_benchmark(det_frames, gt_frames, config=None):
    """Evaluate every (class, difficulty, metric) cell.

    Args:
        det_frames: frame id -> detection objects (with scores).
        gt_frames: frame id -> ground-truth objects.
    """
    cfg = config or EvalConfig()
    if set(det_frames) != set(gt_frames):
        extra = sorted(set(det_frames) ^ set(gt_frames))
        raise FrameMismatch(f"frame ids differ between detections and ground truth: {extra[:5]}")
    frames = sorted(gt_frames)
    cells = {}
    for cls in cfg.classes:
        thr = cfg.thresholds[cls]
        per_frame = []
        for fid in frames:
            gts, diff, neighbor, dontcare = _frame_entries(gt_frames[fid], cls, cfg)
            dets = [o for o in det_frames[fid] if o.class_name == cls.label_name]
            boxes = [object_to_box(o) for o in dets]
            scores = [o.score if o.score is not None else 0.0 for o in dets]
            cover = [max((dontcare_overlap(o.bbox2d, dc) for dc in dontcare), default=0.0) for o in dets]
            ious = {m: np.array([[fn(b, g) for g in gts] for b in boxes]).reshape(len(boxes), len(gts))
                    for m, fn in METRICS.items()}
            per_frame.append((scores, ious, diff, neighbor, cover))
        for level in BUCKETS:
            for metric in METRICS:
                all_scores, all_tp, num_gt = [], [], 0
                for scores, ious, diff, neighbor, cover in per_frame:
                    ignored = neighbor | (diff > level)
                    num_gt += int((~ignored).sum())
                    res = match_detections(scores, ious[metric], thr, ignored, cover)
                    for s, st in zip(scores, res.status):
                        if st != IGNORE:
                            all_scores.append(s)
                            all_tp.append(st == TP)
                cell = CellResult(num_gt)
                if num_gt:
                    curve = pr_curve(all_scores, all_tp, num_gt)
                    cell = CellResult(num_gt, curve, average_precision(curve, 40), average_precision(curve, 11))
                cells[(cls, level, metric)] = cell
    return EvalReport(cells)
