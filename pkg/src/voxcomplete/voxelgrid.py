"""Sparse voxel tensors, point-cloud voxelization, and coordinate algebra.

Coordinates are signed int64 grid indices; every tensor keeps its active
set lexicographically sorted so iteration order (and therefore every
downstream reduction) is reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_STRIDES = ((2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 1, 5))


@dataclass(frozen=True)
class GridConfig:
    """Level-1 grid geometry plus the per-transition pooling strides."""

    origin: tuple = (-6.4, -6.4, -0.4)
    voxel_size: tuple = (0.1, 0.1, 0.2)
    extent: tuple = (128, 128, 16)
    strides: tuple = DEFAULT_STRIDES

    def __post_init__(self):
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.extent) != 3:
            raise ValueError("origin, voxel_size and extent must have 3 components")
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if any(e < 1 for e in self.extent):
            raise ValueError(f"extent must be >= 1 per axis, got {self.extent}")
        for s in self.strides:
            if len(s) != 3 or any(k < 1 for k in s):
                raise ValueError(f"stride components must be >= 1, got {s}")

    @property
    def levels(self) -> int:
        return len(self.strides) + 1

    def stride_to_next(self, level: int):
        """Pooling kernel taking level -> level+1."""
        return np.asarray(self.strides[level - 1], dtype=np.int64)

    def cumulative_stride(self, level: int):
        cum = np.ones(3, dtype=np.int64)
        for s in self.strides[: level - 1]:
            cum *= np.asarray(s, dtype=np.int64)
        return cum

    def level_extent(self, level: int):
        ext = np.asarray(self.extent, dtype=np.int64)
        for s in self.strides[: level - 1]:
            ext = -(-ext // np.asarray(s, dtype=np.int64))  # ceil-div
        return ext

    def level_voxel_size(self, level: int):
        return np.asarray(self.voxel_size) * self.cumulative_stride(level)

    def to_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "voxel_size": list(self.voxel_size),
            "extent": list(self.extent),
            "strides": [list(s) for s in self.strides],
        }

    @staticmethod
    def from_dict(d: dict) -> "GridConfig":
        return GridConfig(
            origin=tuple(d.get("origin", GridConfig.origin)),
            voxel_size=tuple(d.get("voxel_size", GridConfig.voxel_size)),
            extent=tuple(d.get("extent", GridConfig.extent)),
            strides=tuple(tuple(s) for s in d.get("strides", DEFAULT_STRIDES)),
        )


def lexsort_rows(coords: np.ndarray) -> np.ndarray:
    """Ordering that sorts [n,3] integer rows lexicographically."""
    if len(coords) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def linearize(coords: np.ndarray, extent) -> np.ndarray:
    """Bijective int64 key preserving lexicographic order within `extent`."""
    ex = np.asarray(extent, dtype=np.int64)
    c = np.asarray(coords, dtype=np.int64)
    if len(c) == 0:
        return np.zeros(0, dtype=np.int64)
    return (c[:, 0] * ex[1] + c[:, 1]) * ex[2] + c[:, 2]


class SparseVoxelTensor:
    """Active voxel coordinates with per-voxel feature rows.

    `coords` must be unique and lexicographically sorted (row order is the
    feature row order). `features` is either a float64 [n, c] array or an
    autodiff Var of the same shape; both expose `.shape`.
    """

    def __init__(self, level: int, coords: np.ndarray, features, grid: GridConfig,
                 dropped: int = 0):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        keys = linearize(coords, grid.level_extent(level))
        if len(keys) > 1:
            dk = np.diff(keys)
            if np.any(dk < 0):
                raise ValueError("coords must be lexicographically sorted")
            if np.any(dk == 0):
                raise ValueError("duplicate voxel coordinates")
        if features.shape[0] != len(coords):
            raise ValueError(
                f"feature rows {features.shape[0]} != active coords {len(coords)}"
            )
        self.level = level
        self.coords = coords
        self.features = features
        self.grid = grid
        self.dropped = dropped
        self._keys = keys

    @property
    def num_active(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def row_index(self, coords: np.ndarray) -> np.ndarray:
        """Row index for each query coordinate, -1 where inactive."""
        q = linearize(coords, self.grid.level_extent(self.level))
        pos = np.searchsorted(self._keys, q)
        pos = np.clip(pos, 0, max(len(self._keys) - 1, 0))
        hit = (len(self._keys) > 0) & (self._keys[pos] == q) if len(self._keys) else np.zeros(len(q), dtype=bool)
        return np.where(hit, pos, -1).astype(np.int64)


def voxelize(points: np.ndarray, grid: GridConfig, level: int = 1) -> SparseVoxelTensor:
    """Bin points into voxels; per-voxel feature = mean of the point rows.

    `points` is [n, 3+c] with xyz in the leading columns; the mean covers
    all columns, so position channels average alongside extra features.
    Points outside the level extent are dropped and counted. Accumulation
    runs in a fully sorted order, making the result independent of the
    input permutation bit-for-bit.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 3:
        raise ValueError("points must be [n, 3+c]")
    ext = grid.level_extent(level)
    vs = grid.level_voxel_size(level)
    coords = np.floor((points[:, :3] - np.asarray(grid.origin)) / vs).astype(np.int64)
    inside = np.all((coords >= 0) & (coords < ext), axis=1)
    dropped = int(len(points) - inside.sum())
    coords = coords[inside]
    pts = points[inside]
    if len(pts) == 0:
        return SparseVoxelTensor(level, np.zeros((0, 3), dtype=np.int64),
                                 np.zeros((0, points.shape[1])), grid, dropped)
    # Full sort (voxel key, then point payload) fixes the summation order.
    keys = linearize(coords, ext)
    order = np.lexsort(tuple(pts[:, i] for i in range(pts.shape[1] - 1, -1, -1)) + (keys,))
    keys = keys[order]
    coords = coords[order]
    pts = pts[order]
    uniq_keys, first, counts = np.unique(keys, return_index=True, return_counts=True)
    sums = np.add.reduceat(pts, first, axis=0)
    feats = sums / counts[:, None]
    return SparseVoxelTensor(level, coords[first], feats, grid, dropped)


def max_pool_occupancy(coords: np.ndarray, kernel) -> np.ndarray:
    """Parent coords at the next level: floor-division, occupied iff any child is."""
    k = np.asarray(kernel, dtype=np.int64)
    if np.any(k < 1):
        raise ValueError(f"kernel components must be >= 1, got {kernel}")
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(c) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    return np.unique(c // k, axis=0)


def kernel_offsets(kernel) -> np.ndarray:
    """All per-axis offsets in [0, kernel), lexicographic order."""
    k = np.asarray(kernel, dtype=np.int64)
    grid = np.stack(np.meshgrid(np.arange(k[0]), np.arange(k[1]), np.arange(k[2]),
                                indexing="ij"), axis=-1)
    return grid.reshape(-1, 3).astype(np.int64)


def expand_children(parent_coords: np.ndarray, kernel, child_extent=None):
    """Each parent emits S = prod(kernel) children (parent*kernel + offset).

    Emission order is parent-major with offsets lexicographic, which keeps
    the flat list lexicographically sorted when parents are. Returns
    (child_coords, in_extent_mask); the mask is all-True when no extent is
    given, otherwise children outside [0, child_extent) are flagged for
    clipping by the caller.
    """
    p = np.asarray(parent_coords, dtype=np.int64).reshape(-1, 3)
    offsets = kernel_offsets(kernel)
    children = (p[:, None, :] * np.asarray(kernel, dtype=np.int64) + offsets[None, :, :])
    children = children.reshape(-1, 3)
    if child_extent is None:
        mask = np.ones(len(children), dtype=bool)
    else:
        ext = np.asarray(child_extent, dtype=np.int64)
        mask = np.all((children >= 0) & (children < ext), axis=1)
    return children, mask


@dataclass
class AlignResult:
    """Union of two active sets plus the row maps used for zero-filled concat."""

    coords: np.ndarray          # [n_union, 3] lex-sorted
    rows_a: np.ndarray          # union row of each a-row
    rows_b: np.ndarray          # union row of each b-row
    in_a: np.ndarray = field(default=None)  # per-union-row presence masks
    in_b: np.ndarray = field(default=None)


def align_union(a: SparseVoxelTensor, b: SparseVoxelTensor) -> AlignResult:
    """Union the active sets of two same-level tensors.

    Rows absent from one side are zero-filled by the caller (scatter into
    zeros using rows_a / rows_b).
    """
    if a.level != b.level:
        raise ValueError(f"level mismatch: {a.level} != {b.level}")
    stacked = np.concatenate([a.coords, b.coords], axis=0)
    if len(stacked) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return AlignResult(np.zeros((0, 3), dtype=np.int64), empty, empty,
                           np.zeros(0, dtype=bool), np.zeros(0, dtype=bool))
    coords, inverse = np.unique(stacked, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    rows_a = inverse[: a.num_active]
    rows_b = inverse[a.num_active:]
    in_a = np.zeros(len(coords), dtype=bool)
    in_b = np.zeros(len(coords), dtype=bool)
    in_a[rows_a] = True
    in_b[rows_b] = True
    return AlignResult(coords, rows_a, rows_b, in_a, in_b)


def to_point_cloud(coords: np.ndarray, grid: GridConfig, level: int,
                   scores: np.ndarray = None, threshold: float = None) -> np.ndarray:
    """Voxel-center points (meters) for kept coords.

    With `scores` given, only coords scoring strictly above `threshold`
    are converted.
    """
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if scores is not None:
        if threshold is None or not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold in [0,1] required when scores are given")
        c = c[np.asarray(scores, dtype=np.float64) > threshold]
    vs = grid.level_voxel_size(level)
    return np.asarray(grid.origin) + (c + 0.5) * vs


class ExistencePyramid:
    """Per-level occupied coordinate sets (binary occupancy labels)."""

    def __init__(self, levels: dict):
        self.levels = {int(k): np.asarray(v, dtype=np.int64).reshape(-1, 3)
                       for k, v in levels.items()}

    def occupied(self, level: int) -> np.ndarray:
        return self.levels[level]

    def contains(self, level: int, coords: np.ndarray, grid: GridConfig) -> np.ndarray:
        """Boolean membership per query coordinate."""
        ext = grid.level_extent(level)
        keys = np.sort(linearize(self.levels[level], ext))
        q = linearize(coords, ext)
        if len(keys) == 0:
            return np.zeros(len(q), dtype=bool)
        pos = np.clip(np.searchsorted(keys, q), 0, len(keys) - 1)
        return keys[pos] == q


def dump_occupancy_ndjson(fh, level: int, coords: np.ndarray, values=None) -> None:
    """One `{"level":i,"coord":[ix,iy,iz],"value":v}` record per voxel."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if values is None:
        values = np.ones(len(coords))
    for (ix, iy, iz), v in zip(coords.tolist(), np.asarray(values, dtype=np.float64).tolist()):
        fh.write(json.dumps({"level": level, "coord": [ix, iy, iz], "value": v},
                            sort_keys=True) + "\n")


def load_occupancy_ndjson(fh):
    """Inverse of dump_occupancy_ndjson: {level: (coords, values)}."""
    per_level: dict[int, list] = {}
    for line in fh:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        per_level.setdefault(int(rec["level"]), []).append((rec["coord"], rec["value"]))
    out = {}
    for level, rows in per_level.items():
        coords = np.asarray([r[0] for r in rows], dtype=np.int64)
        values = np.asarray([r[1] for r in rows], dtype=np.float64)
        order = lexsort_rows(coords)
        out[level] = (coords[order], values[order])
    return out
