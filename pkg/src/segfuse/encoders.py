"""Detector input encodings for fused point clouds.

All grids use half-open cells ``[lo + i*size, lo + (i+1)*size)``. Pillars and
voxels are numbered in first-occurrence order of their cell in the input, so
output is deterministic for a given input and seed.
"""

from dataclasses import dataclass, field
from importlib import resources
import math
from pathlib import Path

import numpy as np
import yaml

from .classes import NUM_CLASSES, KittiClass
from .errors import CoordOutOfRange, DegenerateAnchor, InvalidConfig, Overflow
from .geometry import Box3D, cart_to_cyl, normalize_angle

PILLAR_DECORATIONS = 5  # x_c, y_c, z_c, x_p, y_p


@dataclass(frozen=True)
class GridConfig:
    """Ranges ``(min0, min1, min2, max0, max1, max2)`` and cell sizes.

    For cylindrical partitions the three axes are (rho, phi, z) and the phi
    range must be ``[-pi, pi]``.
    """

    point_range: tuple
    voxel_size: tuple
    max_cells: int = 12000
    max_points: int = 100
    class_max_points: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if len(self.point_range) != 6 or len(self.voxel_size) != 3:
            raise InvalidConfig("point_range needs 6 values and voxel_size 3")
        lo, hi = np.array(self.point_range[:3]), np.array(self.point_range[3:])
        if not np.all(hi > lo):
            raise InvalidConfig(f"degenerate range {self.point_range}")
        if not all(s > 0 for s in self.voxel_size):
            raise InvalidConfig(f"cell sizes must be positive, got {self.voxel_size}")
        if self.max_cells < 0 or self.max_points < 1:
            raise InvalidConfig("max_cells must be >= 0 and max_points >= 1")
        if any(int(v) < 1 for v in self.class_max_points.values()):
            raise InvalidConfig("per-class point limits must be >= 1")

    @property
    def grid_shape(self):
        """Number of cells along each axis."""
        lo, hi = np.array(self.point_range[:3]), np.array(self.point_range[3:])
        return tuple(int(math.ceil(v - 1e-9)) for v in (hi - lo) / np.array(self.voxel_size))

    def points_limit(self, cls):
        return int(self.class_max_points.get(KittiClass(cls), self.max_points))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "rho_range" in d:
            rho, z = d.pop("rho_range"), d.pop("z_range")
            point_range = (rho[0], -math.pi, z[0], rho[1], math.pi, z[1])
            if "grid_size" in d:
                n = d.pop("grid_size")
                d["voxel_size"] = tuple((point_range[i + 3] - point_range[i]) / n[i] for i in range(3))
            d["point_range"] = point_range
        class_limits = {KittiClass.from_name(k): int(v) for k, v in (d.pop("class_max_points", None) or {}).items()}
        known = {"point_range", "voxel_size", "max_cells", "max_points", "seed"}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown grid config keys {sorted(unknown)}")
        try:
            return cls(
                point_range=tuple(float(v) for v in d["point_range"]),
                voxel_size=tuple(float(v) for v in d["voxel_size"]),
                max_cells=int(d.get("max_cells", 12000)),
                max_points=int(d.get("max_points", 100)),
                class_max_points=class_limits,
                seed=int(d.get("seed", 0)),
            )
        except KeyError as exc:
            raise InvalidConfig(f"grid config missing {exc}") from None


def load_grid_configs(path=None):
    """Read the pillar/voxel/cylinder sections of a YAML grid config."""
    if path is None:
        text = resources.files("segfuse").joinpath("configs/grid.yaml").read_text()
    else:
        text = Path(path).read_text()
    raw = yaml.safe_load(text) or {}
    seed = raw.pop("seed", 0)
    out = {}
    for name, section in raw.items():
        section = dict(section)
        section.setdefault("seed", seed)
        out[name] = GridConfig.from_dict(section)
    return out


def _cell_index(values, lo, size):
    """floor((v - lo) / size), corrected so that lo + i*size <= v < lo + (i+1)*size."""
    idx = np.floor((values - lo) / size).astype(np.int64)
    idx -= (lo + idx * size > values)
    idx += (lo + (idx + 1) * size <= values)
    return idx


def _stable_argsort(keys):
    """Stable argsort; non-negative keys below 2**32 use two 16-bit radix passes."""
    if len(keys) and keys.min() >= 0 and keys.max() < (1 << 32):
        low = (keys & 0xFFFF).astype(np.uint16)
        high = (keys >> 16).astype(np.uint16)
        perm = np.argsort(low, kind="stable")
        return perm[np.argsort(high[perm], kind="stable")]
    return np.argsort(keys, kind="stable")


def _compact(keys, n_cells):
    # int32 keys sort and index noticeably faster
    return keys.astype(np.int32) if n_cells < (1 << 31) else keys


def _group_first_occurrence(keys):
    """Group equal keys; groups are numbered by first appearance.

    Returns ``(group, sizes, slots)``: the group id of every element, the
    size of every group and each element's position inside its group in
    input order. One stable sort does all three.
    """
    n = len(keys)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    perm = _stable_argsort(keys)
    sorted_keys = keys[perm]
    is_start = np.empty(n, dtype=bool)
    is_start[0] = True
    np.not_equal(sorted_keys[1:], sorted_keys[:-1], out=is_start[1:])
    starts = np.flatnonzero(is_start)
    sizes_by_key = np.diff(np.append(starts, n))
    key_group = np.cumsum(is_start) - 1
    # renumber key-ordered groups by first appearance (perm[start] is the first index)
    order = _stable_argsort(perm[starts])
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    group = np.empty(n, dtype=np.int64)
    group[perm] = rank[key_group]
    slots = np.empty(n, dtype=np.int64)
    slots[perm] = np.arange(n) - starts[key_group]
    return group, sizes_by_key[order], slots


def _slots_in_order(group):
    """Position of every element inside its group, preserving input order."""
    return _group_first_occurrence(group)[2]


@dataclass
class PillarTensor:
    data: np.ndarray  # (D, P, N) float32
    coords: np.ndarray  # (P, 2) int32, (ix, iy)
    counts: np.ndarray  # (P,) int32
    stats: dict

    @property
    def num_pillars(self):
        return self.data.shape[1]


def pillarize(fused, cfg, rng=None):
    """Group points into x-y pillars and decorate them.

    Each stored row is ``(x, y, z, r, x_c, y_c, z_c, x_p, y_p, *extra)``
    where ``extra`` are the remaining input columns (the semantic block for
    fused clouds). Pillars holding more than ``cfg.max_points`` points are
    randomly subsampled with ``rng``; shorter ones are zero padded.
    """
    fused = np.asarray(fused, dtype=np.float32)
    if fused.ndim != 2 or fused.shape[1] < 4:
        raise InvalidConfig(f"expected (N, >=4) points, got {fused.shape}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n_in, width = fused.shape
    depth = width + PILLAR_DECORATIONS
    nx, ny, _ = cfg.grid_shape
    x_lo, y_lo = cfg.point_range[0], cfg.point_range[1]
    res_x, res_y = cfg.voxel_size[0], cfg.voxel_size[1]

    xyz = fused[:, :3].astype(np.float64)
    ix = _cell_index(xyz[:, 0], x_lo, res_x)
    iy = _cell_index(xyz[:, 1], y_lo, res_y)
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    sel = np.flatnonzero(inside)
    pid, sizes, slots = _group_first_occurrence(_compact(iy[sel] * nx + ix[sel], nx * ny))

    keep = pid < cfg.max_cells
    dropped_cap = int((~keep).sum())
    sel, pid, slots = sel[keep], pid[keep], slots[keep]
    sizes = sizes[: cfg.max_cells]
    n_pillars = len(sizes)

    if n_pillars:
        means = np.stack([np.bincount(pid, weights=xyz[sel, k], minlength=n_pillars) for k in range(3)], axis=1)
        means /= sizes[:, None]
    else:
        means = np.zeros((0, 3))

    cap = cfg.max_points
    crowded = sizes[pid] > cap if len(pid) else np.zeros(0, dtype=bool)
    if crowded.any():
        # random subset of each crowded pillar: rank points by a random key
        idx = np.flatnonzero(crowded)
        keys = rng.random(len(idx))
        order = np.lexsort((keys, pid[idx]))
        ranked = idx[order]
        slots[ranked] = _slots_in_order(pid[ranked])
    stored = slots < cap
    dropped_sample = int((~stored).sum())
    sel, pid, slots = sel[stored], pid[stored], slots[stored]

    flat = pid * cap + slots
    # writing in destination order keeps the plane scatter sequential
    order = _stable_argsort(flat)
    flat = flat[order]
    src = sel[order]
    src_pid = pid[order]
    cols = fused.T
    data = np.zeros((depth, n_pillars, cap), dtype=np.float32)
    planes = data.reshape(depth, -1)
    for k in range(4):
        planes[k, flat] = cols[k][src]
    for k in range(3):
        planes[4 + k, flat] = xyz[src, k] - means[src_pid, k]
    planes[7, flat] = xyz[src, 0] - (x_lo + (ix[src] + 0.5) * res_x)
    planes[8, flat] = xyz[src, 1] - (y_lo + (iy[src] + 0.5) * res_y)
    for k in range(4, width):
        planes[PILLAR_DECORATIONS + k, flat] = cols[k][src]

    coords = np.zeros((n_pillars, 2), dtype=np.int32)
    coords[pid, 0] = ix[sel]
    coords[pid, 1] = iy[sel]
    counts = np.minimum(sizes, cap).astype(np.int32)
    stats = {
        "input": n_in,
        "retained": len(sel),
        "dropped_out_of_range": n_in - int(inside.sum()),
        "dropped_pillar_cap": dropped_cap,
        "dropped_subsampled": dropped_sample,
    }
    return PillarTensor(data, coords, counts, stats)


def scatter_to_pseudo_image(pillars, pooled_width, cfg):
    """Max-pool each pillar over its points and scatter to a (C, H, W) canvas.

    Pooling covers only the first ``counts[i]`` slots and the first
    ``pooled_width`` feature channels. The canvas is indexed
    ``[:, ix, iy]``: H runs along x (forward) and W along y.
    """
    depth = pillars.data.shape[0]
    if not 0 < pooled_width <= depth:
        raise InvalidConfig(f"pooled width must be in [1, {depth}], got {pooled_width}")
    nx, ny, _ = cfg.grid_shape
    canvas = np.zeros((pooled_width, nx, ny), dtype=np.float32)
    if pillars.num_pillars == 0:
        return canvas
    ix, iy = pillars.coords[:, 0], pillars.coords[:, 1]
    if ix.min() < 0 or iy.min() < 0 or ix.max() >= nx or iy.max() >= ny:
        raise CoordOutOfRange(f"pillar coordinates exceed the {nx}x{ny} grid")
    valid = np.arange(pillars.data.shape[2])[None, :] < pillars.counts[:, None]
    masked = np.where(valid[None], pillars.data[:pooled_width], -np.inf)
    pooled = masked.max(axis=2)
    canvas[:, ix, iy] = pooled
    return canvas


@dataclass
class VoxelGrid:
    voxels: np.ndarray  # (V, T, F) float32 raw point rows
    local: np.ndarray  # (V, T, 3) float32 offsets from the voxel min corner
    coords: np.ndarray  # (V, 3) int32, (ix, iy, iz)
    counts: np.ndarray  # (V,) int32
    stats: dict


def voxelize(fused, cfg):
    """Assign points to a bounded buffer of voxels, first come first served.

    A voxel's point limit is taken from the class (semantic argmax) of the
    point that opened it, via ``cfg.class_max_points``.
    """
    fused = np.asarray(fused, dtype=np.float32)
    if fused.ndim != 2 or fused.shape[1] < 3:
        raise InvalidConfig(f"expected (N, >=3) points, got {fused.shape}")
    n_in, width = fused.shape
    shape = cfg.grid_shape
    lo = np.array(cfg.point_range[:3])
    size = np.array(cfg.voxel_size)

    xyz = fused[:, :3].astype(np.float64)
    idx = np.stack([_cell_index(xyz[:, k], lo[k], size[k]) for k in range(3)], axis=1)
    inside = np.all((idx >= 0) & (idx < np.array(shape)), axis=1)
    sel = np.flatnonzero(inside)
    linear = (idx[sel, 2] * shape[1] + idx[sel, 1]) * shape[0] + idx[sel, 0]
    vid, sizes, slots = _group_first_occurrence(_compact(linear, shape[0] * shape[1] * shape[2]))

    keep = vid < cfg.max_cells
    dropped_points_cap = int((~keep).sum())
    dropped_voxels = max(len(sizes) - cfg.max_cells, 0)
    sel, vid, slots = sel[keep], vid[keep], slots[keep]
    n_vox = min(len(sizes), cfg.max_cells)

    if width >= 4 + NUM_CLASSES:
        point_cls = fused[:, 4:4 + NUM_CLASSES].argmax(axis=1)
    else:
        point_cls = np.zeros(n_in, dtype=np.int64)
    limit_by_cls = np.array([cfg.points_limit(c) for c in KittiClass])
    opener = np.zeros(n_vox, dtype=np.int64)
    opener[vid[slots == 0]] = sel[slots == 0]
    limits = limit_by_cls[point_cls[opener]] if n_vox else np.zeros(0, dtype=np.int64)
    stored = slots < limits[vid] if len(vid) else np.zeros(0, dtype=bool)
    dropped_full = int((~stored).sum())
    sel, vid, slots = sel[stored], vid[stored], slots[stored]

    depth = int(limit_by_cls.max())
    voxels = np.zeros((n_vox, depth, width), dtype=np.float32)
    local = np.zeros((n_vox, depth, 3), dtype=np.float32)
    coords = np.zeros((n_vox, 3), dtype=np.int32)
    voxels[vid, slots] = fused[sel]
    local[vid, slots] = xyz[sel] - (lo + idx[sel] * size)
    coords[vid] = idx[sel]
    counts = np.bincount(vid, minlength=n_vox).astype(np.int32)
    stats = {
        "input": n_in,
        "retained": len(sel),
        "dropped_out_of_range": n_in - int(inside.sum()),
        "dropped_voxel_cap": dropped_points_cap,
        "dropped_voxels": dropped_voxels,
        "dropped_voxel_full": dropped_full,
    }
    return VoxelGrid(voxels, local, coords, counts, stats)


@dataclass
class CylinderGrid:
    cells: np.ndarray  # (M, 3) int32 (rho bin, phi bin, z bin) of retained points
    point_index: np.ndarray  # (M,) indices into the input cloud
    shape: tuple
    stats: dict

    def populations(self):
        pop = np.zeros(self.shape, dtype=np.int64)
        np.add.at(pop, tuple(self.cells.T), 1)
        return pop


def cyl_partition(fused, cfg):
    """Assign points to (rho, phi, z) cells; phi bins wrap around at +-pi."""
    if not (math.isclose(cfg.point_range[1], -math.pi) and math.isclose(cfg.point_range[4], math.pi)):
        raise InvalidConfig("cylindrical grids need a phi range of [-pi, pi]")
    fused = np.asarray(fused)
    shape = cfg.grid_shape
    cyl = cart_to_cyl(fused[:, :3].astype(np.float64)) if len(fused) else np.zeros((0, 3))
    rho_lo, _, z_lo = cfg.point_range[:3]
    d_rho, d_phi, d_z = cfg.voxel_size
    ir = _cell_index(cyl[:, 0], rho_lo, d_rho)
    ip = np.floor((cyl[:, 1] + math.pi) / d_phi).astype(np.int64) % shape[1]
    iz = _cell_index(cyl[:, 2], z_lo, d_z)
    below = ir < 0
    outside = below | (ir >= shape[0]) | (iz < 0) | (iz >= shape[2])
    sel = np.flatnonzero(~outside)
    cells = np.stack([ir[sel], ip[sel], iz[sel]], axis=1).astype(np.int32)
    stats = {
        "input": len(fused),
        "retained": len(sel),
        "dropped_below_rho_min": int(below.sum()),
        "dropped_out_of_range": int(outside.sum()),
    }
    return CylinderGrid(cells, sel, shape, stats)


def bin_encode_center(point, target, search_range=3.0, bin_size=0.5):
    """Bin index and normalized residual of ``target - point`` per axis.

    Works elementwise on scalars or arrays; offsets of exactly
    ``+search_range`` fall in the last bin.
    """
    point = np.asarray(point, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    offset = target - point
    if np.any(np.abs(offset) > search_range):
        raise Overflow(f"offset {offset} exceeds search range {search_range}")
    n_bins = int(round(2 * search_range / bin_size))
    shifted = offset + search_range
    bins = np.minimum(np.floor(shifted / bin_size).astype(np.int64), n_bins - 1)
    residual = (shifted - (bins + 0.5) * bin_size) / bin_size
    return bins, residual


def bin_decode_center(point, bins, residual, search_range=3.0, bin_size=0.5):
    return np.asarray(point, dtype=np.float64) + (np.asarray(bins) + 0.5 + np.asarray(residual)) * bin_size - search_range


def anchor_residual_encode(gt, anchor):
    """7-vector (dx, dy, dz, dw, dh, dl, dtheta) of ``gt`` relative to ``anchor``."""
    diag = math.hypot(anchor.w, anchor.l)
    if not diag > 0 or not anchor.h > 0:
        raise DegenerateAnchor(f"anchor has no extent: {anchor}")
    return np.array([
        (gt.x - anchor.x) / diag,
        (gt.y - anchor.y) / diag,
        (gt.z - anchor.z) / anchor.h,
        math.log(gt.w / anchor.w),
        math.log(gt.h / anchor.h),
        math.log(gt.l / anchor.l),
        math.sin(gt.yaw - anchor.yaw),
    ])


def anchor_residual_decode(residual, anchor, cls=None, score=None):
    """Inverse of the encoding, assuming |yaw difference| < pi/2."""
    dx, dy, dz, dw, dh, dl, dt = (float(v) for v in residual)
    diag = math.hypot(anchor.w, anchor.l)
    return Box3D(
        anchor.x + dx * diag,
        anchor.y + dy * diag,
        anchor.z + dz * anchor.h,
        anchor.w * math.exp(dw),
        anchor.h * math.exp(dh),
        anchor.l * math.exp(dl),
        normalize_angle(anchor.yaw + math.asin(max(-1.0, min(1.0, dt)))),
        anchor.cls if cls is None else cls,
        score,
    )


def direction_target(gt_yaw, anchor_yaw=0.0):
    """Direction-classifier bit: 1 when the yaw relative to the anchor is >= 0."""
    return int(normalize_angle(gt_yaw - anchor_yaw) >= 0)


_DUMP_DTYPES = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4")}


def write_dump(path, array):
    """Raw little-endian dump preceded by a one-line header, e.g. ``<f4 13,57,100``."""
    array = np.asarray(array)
    dtype = "<i4" if np.issubdtype(array.dtype, np.integer) else "<f4"
    header = f"{dtype} {','.join(str(s) for s in array.shape)}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(array, dtype=_DUMP_DTYPES[dtype]).tobytes())


def read_dump(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        payload = fh.read()
    dtype = _DUMP_DTYPES[header[0]]
    shape = tuple(int(s) for s in header[1].split(",")) if len(header) > 1 and header[1] else ()
    return np.frombuffer(payload, dtype=dtype).reshape(shape)
