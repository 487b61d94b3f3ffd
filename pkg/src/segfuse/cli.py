"""Command-line entry point: ``segfuse <command> [options]``.

Commands read a YAML pipeline config (``--config``); paths inside it are
resolved relative to the config file. Every command writes a tab-separated,
append-only manifest with one record per frame carrying a sha256 of each
output and a digest of the effective configuration.

Exit codes: 0 success, 1 at least one frame failed, 2 configuration error.
"""

import argparse
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import hashlib
from importlib import resources
import json
import logging
import math
from pathlib import Path
import sys

import numpy as np
import yaml

from . import augmentation as aug
from . import diagnostics, encoders, evaluation, fusion, kitti_io
from .classes import DETECTION_CLASSES, NUM_CLASSES, KittiClass
from .errors import FrameMismatch, InvalidConfig, MissingCalibration, SegfuseError

log = logging.getLogger("segfuse")

EXIT_OK, EXIT_FRAME_FAILURE, EXIT_CONFIG = 0, 1, 2

SUFFIX = {
    "velodyne": ".bin",
    "semantic": ".label",
    "scores": ".scores.bin",
    "fused": ".fused.bin",
    "objects": ".txt",
    "calib": ".txt",
}

_PATH_KEYS = ("velodyne_dir", "semantic_dir", "score_dir", "object_dir", "calib_dir", "fused_dir",
              "det_dir", "gt_dir", "class_map", "grid_config", "augment_config", "split")


@dataclass
class PipelineConfig:
    output_dir: Path = Path("segfuse_out")
    velodyne_dir: Path = None
    semantic_dir: Path = None
    score_dir: Path = None
    object_dir: Path = None
    calib_dir: Path = None
    fused_dir: Path = None  # defaults to <output_dir>/fused
    det_dir: Path = None
    gt_dir: Path = None
    class_map: Path = None
    grid_config: Path = None
    augment_config: Path = None
    split: Path = None  # text file, one frame id per line
    mode: str = "label"
    seed: int = 0
    workers: int = 1
    image_size: tuple = diagnostics.IMAGE_SIZE
    jitter: list = field(default_factory=lambda: [[0.0, 0.0], [0.005, 0.05], [0.01, 0.1], [0.02, 0.2]])

    def __post_init__(self):
        if self.mode not in ("label", "score"):
            raise InvalidConfig(f"mode must be 'label' or 'score', got {self.mode!r}")
        if int(self.workers) < 1:
            raise InvalidConfig("workers must be >= 1")
        for key in _PATH_KEYS:
            path = getattr(self, key)
            if path is not None and not Path(path).exists():
                raise InvalidConfig(f"{key} does not exist: {path}")

    @classmethod
    def load(cls, path=None, **overrides):
        raw, base = {}, Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise InvalidConfig(f"config file not found: {path}")
            try:
                raw = yaml.safe_load(path.read_text()) or {}
            except yaml.YAMLError as exc:
                raise InvalidConfig(f"cannot parse {path}: {exc}") from None
            if not isinstance(raw, dict):
                raise InvalidConfig("config must be a mapping")
            base = path.resolve().parent
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        for key in _PATH_KEYS + ("output_dir",):
            if raw.get(key) is not None:
                raw[key] = base / Path(raw[key])
        if "image_size" in raw:
            raw["image_size"] = tuple(int(v) for v in raw["image_size"])
        try:
            return cls(**raw)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    @property
    def fused_input(self):
        return self.fused_dir or self.output_dir / "fused"

    def class_map_obj(self):
        return fusion.ClassMap.load(self.class_map) if self.class_map else fusion.ClassMap.default()

    def grid_configs(self):
        return encoders.load_grid_configs(self.grid_config)

    def augment_cfg(self):
        return aug.AugmentConfig.load(self.augment_config)

    def digest(self, *parts):
        """Hash of the effective settings plus the text of every referenced config file."""
        h = hashlib.sha256()
        settings = {k: str(v) for k, v in asdict(self).items() if k not in ("workers", "output_dir")}
        h.update(json.dumps(settings, sort_keys=True).encode())
        for name, path in (("classmap.txt", self.class_map), ("grid.yaml", self.grid_config),
                           ("augment.yaml", self.augment_config)):
            if name.split(".")[0] in parts or not parts:
                text = Path(path).read_bytes() if path else resources.files("segfuse").joinpath(
                    f"configs/{name}").read_bytes()
                h.update(text)
        return h.hexdigest()[:16]


def sha256(data):
    return hashlib.sha256(data).hexdigest()


def _file_sha(path):
    return sha256(Path(path).read_bytes())


def read_split(path):
    if path is None:
        return None
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


def list_stems(directory, suffix, split=None):
    stems = sorted(p.name[: -len(suffix)] for p in Path(directory).glob(f"*{suffix}") if p.is_file())
    if split is not None:
        wanted = set(split)
        stems = [s for s in stems if s in wanted]
    return stems


class Manifest:
    """Append-only TSV; a record already present verbatim is not written twice."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = list(columns)
        self.lines = set()
        self.records = {}
        if self.path.exists():
            rows = self.path.read_text().splitlines()
            header = rows[0].split("\t") if rows else self.columns
            for line in rows[1:]:
                self.lines.add(line)
                rec = dict(zip(header, line.split("\t")))
                self.records[rec.get("stem")] = rec
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("\t".join(self.columns) + "\n")

    def append(self, record):
        line = "\t".join(str(record.get(c, "")) for c in self.columns)
        if line in self.lines:
            return
        with self.path.open("a") as fh:
            fh.write(line + "\n")
        self.lines.add(line)
        self.records[record.get("stem")] = {c: str(record.get(c, "")) for c in self.columns}

    def done(self, stem, digest, outputs):
        """True when ``stem`` already has a successful record for this digest and unchanged outputs."""
        rec = self.records.get(stem)
        if not rec or rec.get("status") != "ok" or rec.get("config") != digest:
            return False
        for col, path in outputs.items():
            if not Path(path).exists() or _file_sha(path) != rec.get(col):
                return False
        return True


# Worker plumbing. The context is installed once per process so large read-only
# objects (class map, GT database) are not pickled per frame.
_CTX = {}


def _install(ctx):
    _CTX.clear()
    _CTX.update(ctx)


def _guarded(fn, stem):
    try:
        return stem, fn(stem, _CTX), None
    except (SegfuseError, OSError, ValueError) as exc:
        return stem, None, f"{type(exc).__name__}: {exc}"


def _call(args):
    fn, stem = args
    return _guarded(fn, stem)


def map_frames(fn, stems, ctx, workers=1):
    """Run ``fn(stem, ctx)`` for every stem; results come back in stem order."""
    if workers <= 1 or len(stems) <= 1:
        _install(ctx)
        return [_guarded(fn, s) for s in stems]
    with ProcessPoolExecutor(max_workers=workers, initializer=_install, initargs=(ctx,)) as pool:
        return list(pool.map(_call, [(fn, s) for s in stems], chunksize=max(1, len(stems) // (4 * workers))))


def _finish(results, manifest, command):
    failures = 0
    for stem, record, error in results:
        if error is not None:
            failures += 1
            log.error("%s: frame %s failed: %s", command, stem, error)
            manifest.append({"stem": stem, "status": "error", "detail": error.replace("\t", " ")})
        elif record is not None:
            manifest.append(record)
    ok = sum(1 for _, _, e in results if e is None)
    print(f"{command}: {ok} frames ok, {failures} failed")
    return EXIT_FRAME_FAILURE if failures else EXIT_OK


# fuse --------------------------------------------------------------------

FUSE_COLUMNS = ["stem", "status", "mode", "num_points"] + [f"n_{c.name.lower()}" for c in KittiClass] + [
    "sha256", "config", "detail"]


def fuse_frame(stem, ctx):
    cfg = ctx["cfg"]
    out = ctx["out_dir"] / f"{stem}{SUFFIX['fused']}"
    if ctx["manifest"].done(stem, ctx["digest"], {"sha256": out}):
        return None
    points = kitti_io.parse_velodyne((cfg.velodyne_dir / f"{stem}{SUFFIX['velodyne']}").read_bytes())
    fused = fuse_points(points, stem, cfg, ctx["class_map"])
    data = kitti_io.write_fused(fused)
    out.write_bytes(data)
    counts = fusion.class_histogram(fused)
    rec = {"stem": stem, "status": "ok", "mode": cfg.mode, "num_points": len(fused),
           "sha256": sha256(data), "config": ctx["digest"]}
    rec.update({f"n_{c.name.lower()}": int(counts[c]) for c in KittiClass})
    return rec


def fuse_points(points, stem, cfg, class_map):
    """Fuse one scan in the configured mode, reading its label or score file."""
    if cfg.mode == "label":
        if cfg.semantic_dir is None:
            raise InvalidConfig("label mode needs semantic_dir")
        path = cfg.semantic_dir / f"{stem}{SUFFIX['semantic']}"
        if not path.exists():
            raise FileNotFoundError(f"missing semantic label file {path.name}")
        labels = kitti_io.parse_semantic_labels(path.read_bytes())
        return fusion.concat_sem_feature(labels, points, class_map)
    if cfg.score_dir is None:
        raise InvalidConfig("score mode needs score_dir")
    path = cfg.score_dir / f"{stem}{SUFFIX['scores']}"
    if not path.exists():
        raise FileNotFoundError(f"missing score file {path.name}")
    return fusion.concat_score_feature(kitti_io.parse_scores(path.read_bytes(), NUM_CLASSES), points)


def _check_mode_inputs(cfg):
    if cfg.mode == "label" and cfg.semantic_dir is None:
        raise InvalidConfig("label mode needs semantic_dir")
    if cfg.mode == "score" and cfg.score_dir is None:
        raise InvalidConfig("score mode needs score_dir")


def cmd_fuse(cfg):
    if cfg.velodyne_dir is None:
        raise InvalidConfig("fuse needs velodyne_dir")
    _check_mode_inputs(cfg)
    out_dir = cfg.fused_input
    out_dir.mkdir(parents=True, exist_ok=True)
    stems = list_stems(cfg.velodyne_dir, SUFFIX["velodyne"], read_split(cfg.split))
    manifest = Manifest(out_dir / "manifest.tsv", FUSE_COLUMNS)
    digest = cfg.digest("classmap")
    ctx = {"cfg": cfg, "out_dir": out_dir, "class_map": cfg.class_map_obj(), "digest": digest, "manifest": manifest}
    return _finish(map_frames(fuse_frame, stems, ctx, cfg.workers), manifest, "fuse")


# encode ------------------------------------------------------------------

ENCODE_COLUMNS = ["stem", "status", "encoder", "cells", "input", "retained", "dropped", "sha256",
                  "coords_sha256", "config", "detail"]


def encode_frame(stem, ctx):
    cfg, encoder, grid = ctx["cfg"], ctx["encoder"], ctx["grid"]
    out_dir = ctx["out_dir"]
    main_path, coords_path = out_dir / f"{stem}.{encoder}.dump", out_dir / f"{stem}.coords.dump"
    if ctx["manifest"].done(stem, ctx["digest"], {"sha256": main_path, "coords_sha256": coords_path}):
        return None
    fused = kitti_io.parse_fused((cfg.fused_input / f"{stem}{SUFFIX['fused']}").read_bytes())
    if encoder == "pillar":
        res = encoders.pillarize(fused, grid, aug.frame_rng(cfg.seed, stem))
        main, coords, cells = res.data, res.coords, res.num_pillars
    elif encoder == "voxel":
        res = encoders.voxelize(fused, grid)
        main, coords, cells = res.voxels, res.coords, len(res.coords)
    else:
        res = encoders.cyl_partition(fused, grid)
        main, coords, cells = res.point_index.astype(np.int32), res.cells, len(np.unique(res.cells, axis=0))
    encoders.write_dump(main_path, main)
    encoders.write_dump(coords_path, coords)
    stats = res.stats
    return {
        "stem": stem, "status": "ok", "encoder": encoder, "cells": cells, "input": stats["input"],
        "retained": stats["retained"], "dropped": stats["input"] - stats["retained"],
        "sha256": _file_sha(main_path), "coords_sha256": _file_sha(coords_path), "config": ctx["digest"],
        "detail": ";".join(f"{k}={v}" for k, v in stats.items() if k.startswith("dropped")),
    }


def cmd_encode(cfg, encoder):
    grids = cfg.grid_configs()
    name = {"pillar": "pillar", "voxel": "voxel", "cylinder": "cylinder"}[encoder]
    if name not in grids:
        raise InvalidConfig(f"grid config has no '{name}' section")
    grid = replace(grids[name], seed=cfg.seed)
    if not cfg.fused_input.is_dir():
        raise InvalidConfig(f"fused dataset not found at {cfg.fused_input}; run 'fuse' first")
    out_dir = cfg.output_dir / "encoded" / encoder
    out_dir.mkdir(parents=True, exist_ok=True)
    stems = list_stems(cfg.fused_input, SUFFIX["fused"], read_split(cfg.split))
    manifest = Manifest(out_dir / "manifest.tsv", ENCODE_COLUMNS)
    ctx = {"cfg": cfg, "encoder": encoder, "grid": grid, "out_dir": out_dir,
           "digest": cfg.digest("grid") + encoder, "manifest": manifest}
    results = map_frames(encode_frame, stems, ctx, cfg.workers)
    totals = {}
    for _, rec, _ in results:
        for item in (rec or {}).get("detail", "").split(";"):
            if "=" in item:
                k, v = item.split("=")
                totals[k] = totals.get(k, 0) + int(v)
    if totals:
        print("drop counters: " + ", ".join(f"{k}={v}" for k, v in sorted(totals.items())))
    return _finish(results, manifest, "encode")


# augment -----------------------------------------------------------------

AUGMENT_COLUMNS = ["stem", "status", "seed", "frame_key", "num_points", "num_boxes", "placed", "rejected",
                   "perturbed", "reverted", "flipped", "angle", "scale", "sha256", "label_sha256", "config",
                   "detail"]


def _read_calib(cfg, stem, required=False):
    if cfg.calib_dir is None:
        if required:
            raise MissingCalibration("calib_dir is not configured")
        return None
    path = cfg.calib_dir / f"{stem}{SUFFIX['calib']}"
    if not path.exists():
        raise MissingCalibration(f"missing calibration file {path.name}")
    return kitti_io.parse_calibration(path.read_text())


def _read_objects(cfg, stem):
    """Raw non-empty label lines and their parsed objects, index aligned."""
    path = cfg.object_dir / f"{stem}{SUFFIX['objects']}"
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if ln.split()]
    return lines, kitti_io.parse_object_labels(text)


def _has_box(obj):
    return not obj.is_dontcare and all(v > 0 for v in obj.dimensions)


def frame_scene(cfg, stem):
    calib = _read_calib(cfg, stem)
    fused = kitti_io.parse_fused((cfg.fused_input / f"{stem}{SUFFIX['fused']}").read_bytes())
    lines, objects = _read_objects(cfg, stem)
    boxed = [i for i, o in enumerate(objects) if _has_box(o)]
    boxes = [kitti_io.object_to_box(objects[i], calib) for i in boxed]
    return fused, calib, lines, objects, boxed, boxes


def _gt_database(cfg, stems):
    frames = []
    for stem in stems:
        fused, _, _, _, _, boxes = frame_scene(cfg, stem)
        frames.append((stem, fused, [b for b in boxes if b.cls in DETECTION_CLASSES]))
    return aug.build_gt_database(frames)


def augment_frame(stem, ctx):
    cfg, acfg, db = ctx["cfg"], ctx["acfg"], ctx["db"]
    fused, calib, lines, objects, boxed, boxes = frame_scene(cfg, stem)
    scene = aug.Scene.from_boxes(fused, boxes)
    rng = aug.frame_rng(cfg.seed, stem)
    out, stats = aug.augment_scene(scene, db, acfg, rng)
    geometry_kept = not stats["flipped"] and stats["angle"] == 0.0 and stats["scale"] == 1.0

    label_lines = []
    for k, i in enumerate(boxed):
        if np.array_equal(out.boxes[k], scene.boxes[k]):
            label_lines.append(lines[i])
            continue
        src = objects[i]
        obj = kitti_io.box_to_object(out.box(k), calib, src.class_name)
        obj.truncation, obj.occlusion = src.truncation, src.occlusion
        label_lines.append(kitti_io.format_object(obj))
    if geometry_kept:
        # objects without a 3D box (DontCare) are only meaningful in the original frame
        label_lines += [lines[i] for i, o in enumerate(objects) if not _has_box(o)]
    for k in range(len(boxed), len(out.boxes)):
        obj = kitti_io.box_to_object(out.box(k), calib)
        obj.truncation, obj.occlusion = 0.0, 0
        label_lines.append(kitti_io.format_object(obj))

    data = kitti_io.write_fused(out.points.astype(np.float32))
    text = "".join(ln + "\n" for ln in label_lines)
    (ctx["out_dir"] / f"{stem}{SUFFIX['fused']}").write_bytes(data)
    (ctx["out_dir"] / f"{stem}{SUFFIX['objects']}").write_text(text)
    return {
        "stem": stem, "status": "ok", "seed": cfg.seed, "frame_key": aug.frame_seed_key(stem),
        "num_points": len(out.points), "num_boxes": len(out.boxes), "placed": stats.get("placed", 0),
        "rejected": stats.get("rejected", 0), "perturbed": stats["perturbed"], "reverted": stats["reverted"],
        "flipped": int(stats["flipped"]), "angle": repr(stats["angle"]), "scale": repr(stats["scale"]),
        "sha256": sha256(data), "label_sha256": sha256(text.encode()), "config": ctx["digest"],
    }


def cmd_augment(cfg):
    if cfg.object_dir is None:
        raise InvalidConfig("augment needs object_dir")
    if not cfg.fused_input.is_dir():
        raise InvalidConfig(f"fused dataset not found at {cfg.fused_input}; run 'fuse' first")
    acfg = cfg.augment_cfg()
    stems = list_stems(cfg.fused_input, SUFFIX["fused"], read_split(cfg.split))
    missing = [s for s in stems if not (cfg.object_dir / f"{s}{SUFFIX['objects']}").exists()]
    db = None
    if acfg.sample_counts:
        db = _gt_database(cfg, [s for s in stems if s not in missing])
        db.save(cfg.output_dir / "gt_database")
        print(f"gt database: {len(db)} objects")
    out_dir = cfg.output_dir / "augmented"
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out_dir / "manifest.tsv", AUGMENT_COLUMNS)
    ctx = {"cfg": cfg, "acfg": acfg, "db": db, "out_dir": out_dir, "digest": cfg.digest("augment")}
    results = map_frames(augment_frame, stems, ctx, cfg.workers)
    placed = sum(int(r["placed"]) for _, r, _ in results if r)
    rejected = sum(int(r["rejected"]) for _, r, _ in results if r)
    reverted = sum(int(r["reverted"]) for _, r, _ in results if r)
    print(f"samples placed {placed}, rejected on collision {rejected}, per-box reverts {reverted}")
    return _finish(results, manifest, "augment")


# eval --------------------------------------------------------------------

def _load_labels(directory, stems):
    return {s: kitti_io.parse_object_labels((Path(directory) / f"{s}{SUFFIX['objects']}").read_text())
            for s in stems}


def cmd_eval(cfg, det_dir=None, gt_dir=None, baseline=None, out_dir=None, name="result"):
    det_dir, gt_dir = det_dir or cfg.det_dir, gt_dir or cfg.gt_dir or cfg.object_dir
    if det_dir is None or gt_dir is None:
        raise InvalidConfig("eval needs a detection and a ground-truth directory")
    for path in (det_dir, gt_dir):
        if not Path(path).is_dir():
            raise InvalidConfig(f"not a directory: {path}")
    split = read_split(cfg.split)
    gt_stems = list_stems(gt_dir, SUFFIX["objects"], split)
    det_stems = list_stems(det_dir, SUFFIX["objects"], split)
    report = evaluation.evaluate_benchmark(_load_labels(det_dir, det_stems), _load_labels(gt_dir, gt_stems))
    out_dir = Path(out_dir) if out_dir else cfg.output_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = report.to_tsv(name)
    (out_dir / "report.tsv").write_text(tsv)
    (out_dir / "report.txt").write_text(report.to_text(name))
    print(report.to_text(name))
    if baseline is not None:
        delta = evaluation.delta_tsv(tsv, Path(baseline).read_text())
        (out_dir / "delta.tsv").write_text(delta)
        print(delta)
    return EXIT_OK


# diag-projection ---------------------------------------------------------

DIAG_COLUMNS = ["stem", "status", "rotation", "translation", "num_points", "behind", "in_image_fraction",
                "visible", "compared", "flips", "flip_rate", "detail"]


def diag_frame(stem, ctx):
    cfg = ctx["cfg"]
    calib = _read_calib(cfg, stem, required=True)
    points = kitti_io.parse_velodyne((cfg.velodyne_dir / f"{stem}{SUFFIX['velodyne']}").read_bytes())
    fused = fuse_points(points, stem, cfg, ctx["class_map"])
    labels = fusion.semantic_argmax(fused)
    rows = []
    key = aug.frame_seed_key(stem)
    for report, (rot, trans) in zip(
            diagnostics.flip_rate_curve(points, labels, calib, ctx["jitter"], [cfg.seed, key], cfg.image_size),
            ctx["jitter"]):
        rows.append({"stem": stem, "status": "ok", "rotation": rot, "translation": trans,
                     "num_points": report.num_points, "behind": report.behind,
                     "in_image_fraction": f"{report.in_image_fraction:.6f}", "visible": report.visible,
                     "compared": report.compared, "flips": report.flips,
                     "flip_rate": f"{report.flip_rate:.6f}"})
    return rows


def cmd_diag_projection(cfg, jitter=None):
    if cfg.velodyne_dir is None:
        raise InvalidConfig("diag-projection needs velodyne_dir")
    _check_mode_inputs(cfg)
    jitter = [(float(r), float(t)) for r, t in (jitter or cfg.jitter)]
    stems = list_stems(cfg.velodyne_dir, SUFFIX["velodyne"], read_split(cfg.split))
    out_path = cfg.output_dir / "diag" / "projection.tsv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    ctx = {"cfg": cfg, "class_map": cfg.class_map_obj(), "jitter": jitter}
    results = map_frames(diag_frame, stems, ctx, cfg.workers)
    lines = ["\t".join(DIAG_COLUMNS)]
    failures = 0
    for stem, rows, error in results:
        if error is not None:
            failures += 1
            log.error("diag-projection: frame %s failed: %s", stem, error)
            lines.append("\t".join([stem, "error"] + [""] * (len(DIAG_COLUMNS) - 3) + [error]))
            continue
        for row in rows:
            lines.append("\t".join(str(row.get(c, "")) for c in DIAG_COLUMNS))
    out_path.write_text("\n".join(lines) + "\n")
    # mean flip rate per magnitude over frames
    for rot, trans in jitter:
        rates = [float(r["flip_rate"]) for _, rows, e in results if e is None for r in rows
                 if r["rotation"] == rot and r["translation"] == trans]
        mean = sum(rates) / len(rates) if rates else math.nan
        print(f"jitter rot={rot:g} rad trans={trans:g} m: mean flip rate {mean:.4f} over {len(rates)} frames")
    print(f"diag-projection: {len(stems) - failures} frames ok, {failures} failed")
    return EXIT_FRAME_FAILURE if failures else EXIT_OK


# selftest ----------------------------------------------------------------

def cmd_selftest(seed=0):
    from .selftest import run_selftest

    results = run_selftest(seed=seed)
    return EXIT_OK if all(r.ok for r in results) else EXIT_FRAME_FAILURE


# -------------------------------------------------------------------------

def _parse_jitter(text):
    """``"0:0,0.01:0.1"`` -> [(0.0, 0.0), (0.01, 0.1)] (rotation rad : translation m)."""
    out = []
    for item in text.split(","):
        rot, _, trans = item.partition(":")
        out.append((float(rot), float(trans or 0.0)))
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="segfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline YAML config")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--workers", type=int, help="parallel frame workers (overrides config)")
    common.add_argument("--mode", choices=("label", "score"), help="fusion mode (overrides config)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fuse", parents=[common], help="concatenate semantic features onto scans")
    p = sub.add_parser("encode", parents=[common], help="pillar / voxel / cylinder encodings of fused frames")
    p.add_argument("--encoder", choices=("pillar", "voxel", "cylinder"), default="pillar")
    sub.add_parser("augment", parents=[common], help="GT sampling and geometric augmentation")
    p = sub.add_parser("eval", parents=[common], help="KITTI AP evaluation")
    p.add_argument("--det-dir", type=Path)
    p.add_argument("--gt-dir", type=Path)
    p.add_argument("--out", type=Path, help="report directory (default <output_dir>/eval)")
    p.add_argument("--name", default="result", help="row label in the report")
    p.add_argument("--baseline-report", type=Path, help="report.tsv to difference against")
    p = sub.add_parser("diag-projection", parents=[common], help="label flips under calibration jitter")
    p.add_argument("--jitter", type=_parse_jitter, help="comma list of rot:trans magnitudes")
    sub.add_parser("selftest", parents=[common], help="run the built-in property checks")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            return cmd_selftest(args.seed or 0)
        cfg = PipelineConfig.load(args.config, seed=args.seed, workers=args.workers, mode=args.mode)
        if args.command == "fuse":
            return cmd_fuse(cfg)
        if args.command == "encode":
            return cmd_encode(cfg, args.encoder)
        if args.command == "augment":
            return cmd_augment(cfg)
        if args.command == "eval":
            if args.baseline_report is not None and not args.baseline_report.is_file():
                raise InvalidConfig(f"baseline report not found: {args.baseline_report}")
            return cmd_eval(cfg, args.det_dir, args.gt_dir, args.baseline_report, args.out, args.name)
        return cmd_diag_projection(cfg, args.jitter)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FrameMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FRAME_FAILURE


if __name__ == "__main__":
    sys.exit(main())
