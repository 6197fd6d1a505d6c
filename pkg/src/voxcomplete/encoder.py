"""Shared pyramid encoder: submanifold and strided sparse convolutions over
sparse voxel tensors, plus the proxy per-voxel detection head.

Gather geometry: an output site o reads input sites o*stride + offset - pad
with offsets enumerated lexicographically in [0, kernel) and
pad = (kernel - stride) // 2 per axis. For stride 1 and odd kernels this is
the usual centered submanifold window; for the [1,1,5] transition the
window covers exactly the five stacked children.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, ShapeError, ValueGraph, Var
from .voxelgrid import GridConfig, SparseVoxelTensor, kernel_offsets, linearize

ENCODER_CHANNELS = (16, 32, 64, 64, 128)
INPUT_POINT_CHANNELS = 5  # x, y, z, intensity, timestamp


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple = ENCODER_CHANNELS
    kernel: tuple = (3, 3, 3)
    last_kernel: tuple = (3, 3, 5)   # kernel of the [1,1,5]-stride stage
    subm_depth: int = 1              # submanifold convs per stage
    input_channels: int = INPUT_POINT_CHANNELS

    def validate(self, grid: GridConfig) -> None:
        if len(self.channels) != grid.levels:
            raise ValueError(
                f"channels has {len(self.channels)} entries for {grid.levels} levels"
            )
        if self.subm_depth < 1:
            raise ValueError("subm_depth must be >= 1")
        for k in (self.kernel, self.last_kernel):
            if any(v < 1 for v in k):
                raise ValueError(f"kernel components must be >= 1, got {k}")

    def stage_kernel(self, level: int, grid: GridConfig) -> tuple:
        """Kernel for the strided conv taking level -> level+1."""
        return self.last_kernel if level == grid.levels - 1 else self.kernel


@dataclass
class Rulebook:
    """Per-kernel-offset (input row, output row) pairs plus the output sites."""

    offsets: np.ndarray        # [kv, 3]
    pairs: list                # per offset: (in_rows, out_rows) int64 arrays
    out_coords: np.ndarray     # [n_out, 3] lex-sorted

    @property
    def num_out(self) -> int:
        return len(self.out_coords)


def build_rulebook(coords: np.ndarray, kernel, stride, extent,
                   submanifold: bool) -> Rulebook:
    """Enumerate gather pairs for one sparse convolution.

    Submanifold mode keeps the input sites as output sites (odd kernel
    required); strided mode emits floor(c / stride) for every active input.
    """
    kernel = np.asarray(kernel, dtype=np.int64)
    stride = np.asarray(stride, dtype=np.int64)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if submanifold:
        if np.any(kernel % 2 == 0):
            raise ValueError(f"submanifold mode needs odd kernel, got {tuple(kernel)}")
        if np.any(stride != 1):
            raise ValueError("submanifold mode requires stride 1")
        out_coords = coords
    else:
        out_coords = (np.unique(coords // stride, axis=0)
                      if len(coords) else coords.copy())
    pad = np.maximum((kernel - stride) // 2, 0)
    ext = np.asarray(extent, dtype=np.int64)
    in_keys = linearize(coords, ext)
    offsets = kernel_offsets(kernel)
    pairs = []
    for off in offsets:
        cand = out_coords * stride + off - pad
        ok = np.all((cand >= 0) & (cand < ext), axis=1)
        rows_out = np.nonzero(ok)[0]
        if len(rows_out) == 0 or len(in_keys) == 0:
            pairs.append((np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)))
            continue
        q = linearize(cand[ok], ext)
        pos = np.clip(np.searchsorted(in_keys, q), 0, len(in_keys) - 1)
        hit = in_keys[pos] == q
        pairs.append((pos[hit].astype(np.int64), rows_out[hit].astype(np.int64)))
    return Rulebook(offsets, pairs, out_coords)


def sparse_conv(g: ValueGraph, x: Var, rulebook: Rulebook, weight_name: str) -> Var:
    """Gather-multiply-scatter convolution recorded as one fused graph op.

    The registered weight has dims [kernel volume, c_in, c_out]. Within one
    offset the out rows are unique, so scatter uses plain fancy indexing;
    offsets accumulate sequentially for a fixed summation order.
    """
    w = g.params.value(weight_name)
    xv = x.array
    kv = len(rulebook.offsets)
    if w.ndim != 3 or w.shape[0] != kv:
        raise ShapeError(f"sparse_conv '{weight_name}': weight dims {w.shape} "
                         f"!= [{kv}, c_in, c_out]")
    if xv.shape[1] != w.shape[1]:
        raise ShapeError(f"sparse_conv '{weight_name}': input channels {xv.shape[1]} "
                         f"!= weight c_in {w.shape[1]}")
    n_out = rulebook.num_out
    out = np.zeros((n_out, w.shape[2]))
    for o, (ri, ro) in enumerate(rulebook.pairs):
        if len(ri):
            out[ro] += xv[ri] @ w[o]

    def vjp(grad):
        dx = np.zeros_like(xv)
        dw = np.zeros_like(w)
        for o, (ri, ro) in enumerate(rulebook.pairs):
            if len(ri):
                go = grad[ro]
                dx[ri] += go @ w[o].T
                dw[o] = xv[ri].T @ go
        return (dx,), {weight_name: dw}

    return g.record("sparse_conv", (x,), out, vjp)


def register_encoder_params(store: ParamStore, grid: GridConfig,
                            cfg: EncoderConfig) -> None:
    cfg.validate(grid)
    kv = int(np.prod(cfg.kernel))
    store.register("encoder.stem.conv", (kv, cfg.input_channels, cfg.channels[0]))
    store.register_norm("encoder.stem.norm", cfg.channels[0])
    for level in range(1, grid.levels):
        kern = cfg.stage_kernel(level, grid)
        prefix = f"encoder.level{level + 1}"
        c_in, c_out = cfg.channels[level - 1], cfg.channels[level]
        store.register(f"{prefix}.down", (int(np.prod(kern)), c_in, c_out))
        store.register_norm(f"{prefix}.norm0", c_out)
        for j in range(cfg.subm_depth):
            store.register(f"{prefix}.sub{j}", (kv, c_out, c_out))
            store.register_norm(f"{prefix}.norm{j + 1}", c_out)
    store.register_linear("encoder.head", cfg.channels[-1], 1)


def _norm_relu(g: ValueGraph, feats: Var, norm_name: str) -> Var:
    return g.relu(g.layer_norm(feats, norm_name + ".g", norm_name + ".b"))


def encoder_forward(g: ValueGraph, tensor: SparseVoxelTensor,
                    cfg: EncoderConfig) -> list:
    """Run the pyramid; returns one SparseVoxelTensor (Var features) per level.

    Each stage is one strided sparse conv followed by submanifold convs,
    each with layer normalization and a rectifier. Active sites of the
    submanifold stages equal their input sites by construction.
    """
    grid = tensor.grid
    cfg.validate(grid)
    feats = tensor.features if isinstance(tensor.features, Var) else g.constant(tensor.features)
    coords = tensor.coords
    rb = build_rulebook(coords, cfg.kernel, (1, 1, 1), grid.level_extent(1), True)
    feats = sparse_conv(g, feats, rb, "encoder.stem.conv")
    feats = _norm_relu(g, feats, "encoder.stem.norm")
    levels = [SparseVoxelTensor(1, coords, feats, grid)]
    for level in range(1, grid.levels):
        prefix = f"encoder.level{level + 1}"
        kern = cfg.stage_kernel(level, grid)
        stride = grid.stride_to_next(level)
        rb = build_rulebook(coords, kern, stride, grid.level_extent(level), False)
        feats = sparse_conv(g, feats, rb, f"{prefix}.down")
        feats = _norm_relu(g, feats, f"{prefix}.norm0")
        coords = rb.out_coords
        for j in range(cfg.subm_depth):
            rb = build_rulebook(coords, cfg.kernel, (1, 1, 1),
                                grid.level_extent(level + 1), True)
            feats = sparse_conv(g, feats, rb, f"{prefix}.sub{j}")
            feats = _norm_relu(g, feats, f"{prefix}.norm{j + 1}")
        levels.append(SparseVoxelTensor(level + 1, coords, feats, grid))
    return levels


def foreground_labels(coords: np.ndarray, grid: GridConfig, level: int,
                      tracks: list, frame_t: int) -> np.ndarray:
    """1.0 where the voxel center falls inside any annotated box at frame_t."""
    from .voxelgrid import to_point_cloud

    centers = to_point_cloud(coords, grid, level)
    labels = np.zeros(len(centers))
    for track in tracks:
        local = track.poses[frame_t].inverse().apply(centers)
        half = np.asarray(track.extent) / 2.0
        inside = np.all(np.abs(local) <= half + 1e-9, axis=1)
        labels[inside] = 1.0
    return labels


def proxy_detection_loss(g: ValueGraph, top: SparseVoxelTensor,
                         labels: np.ndarray) -> Var:
    """Mean BCE-with-logits over the coarsest level's active sites.

    Stands in for a host detector's loss while keeping the same gradient
    pathway into the shared encoder.
    """
    if len(labels) != top.num_active:
        raise ShapeError(f"labels ({len(labels)}) != active sites ({top.num_active})")
    logits = g.linear(top.features, "encoder.head")
    logits = g.reshape(logits, (top.num_active,))
    return g.bce_with_logits(logits, g.constant(np.asarray(labels, dtype=np.float64)))
