"""Completion decoder: attention-based up-sampling of completion features,
detection-to-completion feature translation, zero-filled sparsity
concatenation, per-level existence scoring with pruning, and the
completion/joint losses.

Levels run coarsest-first. The coarsest level is a plain per-voxel linear
bridge; every finer level unions up-sampled children with the
detection-active sites, scores each generated voxel, and prunes before the
next level consumes it (ground-truth occupancy in training, score
threshold in inference).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, ValueGraph, Var
from .encoder import EncoderConfig
from .voxelgrid import (ExistencePyramid, GridConfig, SparseVoxelTensor,
                        align_union, expand_children)

# f_T channels for levels 1..5 (finest..coarsest).
DECODER_CHANNELS = (16, 32, 64, 160, 128)


@dataclass(frozen=True)
class DecoderConfig:
    channels: tuple = DECODER_CHANNELS   # indexed [level-1], finest first
    beta: float = 0.7                    # inference keep threshold, strict >
    alpha: float = 3.0                   # completion weight in the joint loss
    empty_cap: float = 0.75              # max empty/all ratio per training batch

    def validate(self, grid: GridConfig) -> None:
        if len(self.channels) != grid.levels:
            raise ValueError(
                f"channels has {len(self.channels)} entries for {grid.levels} levels"
            )
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0,1), got {self.beta}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 < self.empty_cap <= 1.0:
            raise ValueError(f"empty_cap must be in (0,1], got {self.empty_cap}")

    def level_channels(self, level: int) -> int:
        return self.channels[level - 1]


@dataclass
class LevelOutput:
    level: int
    tensor: SparseVoxelTensor      # f_T at this level (generated coords)
    scores: Var = None             # existence score per generated voxel
    kept_rows: np.ndarray = None   # rows propagated to the next level
    labels: np.ndarray = None      # training only: occupancy per generated voxel
    supervised_rows: np.ndarray = None  # training only: rows entering the loss
    empty_ratio: float = None      # training only: post-subsampling empty/all

    @property
    def kept_coords(self) -> np.ndarray:
        return self.tensor.coords[self.kept_rows]


def register_decoder_params(store: ParamStore, grid: GridConfig,
                            enc_cfg: EncoderConfig, dec_cfg: DecoderConfig) -> None:
    dec_cfg.validate(grid)
    n = grid.levels
    store.register_linear(f"decoder.level{n}.bridge",
                          enc_cfg.channels[-1], dec_cfg.level_channels(n))
    for level in range(n - 1, 0, -1):
        c2 = dec_cfg.level_channels(level)
        c_prev = dec_cfg.level_channels(level + 1)
        s = int(np.prod(grid.stride_to_next(level)))
        prefix = f"decoder.level{level}"
        store.register_linear(f"{prefix}.ub.expand", c_prev, s * c2)
        for h in range(s):
            store.register_linear(f"{prefix}.ub.head{h}", c2, c2)
        store.register_linear(f"{prefix}.ub.merge", c2, c2)
        store.register_norm(f"{prefix}.ub.norm", c2)
        store.register_linear(f"{prefix}.ib.proj", enc_cfg.channels[level - 1], c2)
        store.register_linear(f"{prefix}.ib.q", c2, c2, bias=False)
        store.register_linear(f"{prefix}.ib.k", c2, c2, bias=False)
        store.register_linear(f"{prefix}.ib.v", c2, c2, bias=False)
        store.register_linear(f"{prefix}.ib.merge", c2, c2)
        store.register_norm(f"{prefix}.ib.norm", c2)
        store.register_linear(f"{prefix}.concat", 2 * c2, c2)
        store.register_linear(f"{prefix}.scm", c2, 1)


def coarsest_bridge(g: ValueGraph, top: SparseVoxelTensor,
                    dec_cfg: DecoderConfig) -> SparseVoxelTensor:
    """Per-voxel linear map at the coarsest level; active set unchanged."""
    n = top.grid.levels
    feats = g.linear(top.features, f"decoder.level{n}.bridge")
    return SparseVoxelTensor(top.level, top.coords, feats, top.grid)


def upsample_bridge(g: ValueGraph, prev: SparseVoxelTensor,
                    dec_cfg: DecoderConfig) -> SparseVoxelTensor:
    """Expand each parent voxel into its S children via per-head token attention.

    One attention head per sub-voxel: head h scores the S expanded tokens,
    normalizes over the token axis per channel, and its gated sum becomes
    child h's feature. Children land on the expand_children coordinates in
    lexicographic offset order (out-of-extent children clipped), followed
    by a residual linear and layer normalization.
    """
    grid = prev.grid
    level = prev.level - 1
    c2 = dec_cfg.level_channels(level)
    kernel = grid.stride_to_next(level)
    s = int(np.prod(kernel))
    prefix = f"decoder.level{level}.ub"
    n_par = prev.num_active

    expanded = g.linear(prev.features, f"{prefix}.expand")     # [n, S*c2]
    tokens = g.reshape(expanded, (n_par, s, c2))
    head_outs = []
    for h in range(s):
        scores = g.linear(tokens, f"{prefix}.head{h}")         # [n, S, c2]
        attn = g.softmax(scores, axis=1)                       # over tokens
        gated = g.mul(attn, tokens)
        summed = _token_axis_sum(g, gated, n_par, s, c2)       # [n, c2]
        head_outs.append(g.reshape(summed, (n_par, 1, c2)))
    stacked = g.concat(head_outs, axis=1)                      # [n, S, c2]
    child_feats = g.reshape(stacked, (n_par * s, c2))

    children, in_extent = expand_children(prev.coords, kernel, grid.level_extent(level))
    if not np.all(in_extent):
        child_feats = g.take_rows(child_feats, np.nonzero(in_extent)[0])
        children = children[in_extent]
    merged = g.add(g.linear(child_feats, f"{prefix}.merge"), child_feats)
    out = g.layer_norm(merged, f"{prefix}.norm.g", f"{prefix}.norm.b")
    return SparseVoxelTensor(level, children, out, grid)


def _token_axis_sum(g: ValueGraph, gated: Var, n: int, s: int, c2: int) -> Var:
    """Sum an [n, S, c] tensor over the token axis via a constant matmul."""
    flat = g.reshape(gated, (n, s * c2))
    ones = np.zeros((s * c2, c2))
    for t in range(s):
        ones[t * c2: (t + 1) * c2] = np.eye(c2)
    return g.matmul(flat, g.constant(ones))


def interpret_bridge(g: ValueGraph, det: SparseVoxelTensor,
                     dec_cfg: DecoderConfig) -> SparseVoxelTensor:
    """Translate detection features into completion semantics per voxel.

    A channel-to-channel attention map (row-normalized outer product of the
    projected query/key vectors) mixes the value projection; a residual
    linear and layer normalization follow. Active set is unchanged.
    """
    level = det.level
    c2 = dec_cfg.level_channels(level)
    prefix = f"decoder.level{level}.ib"
    n = det.num_active
    d = g.linear(det.features, f"{prefix}.proj")               # [n, c2]
    q = g.linear(d, f"{prefix}.q")
    k = g.linear(d, f"{prefix}.k")
    v = g.linear(d, f"{prefix}.v")
    outer = g.mul(g.reshape(q, (n, c2, 1)), g.reshape(k, (n, 1, c2)))
    attn = g.softmax(outer, axis=2)                            # rows sum to 1
    out = _row_mix(g, attn, v, n, c2)
    merged = g.add(g.linear(out, f"{prefix}.merge"), out)
    normed = g.layer_norm(merged, f"{prefix}.norm.g", f"{prefix}.norm.b")
    return SparseVoxelTensor(level, det.coords, normed, det.grid)


def _row_mix(g: ValueGraph, attn: Var, v: Var, n: int, c2: int) -> Var:
    """out[i, r] = sum_c attn[i, r, c] * v[i, c]."""
    prod = g.mul(attn, g.reshape(v, (n, 1, c2)))
    flat = g.reshape(prod, (n * c2, c2))
    summed = g.matmul(flat, g.constant(np.ones((c2, 1))))
    return g.reshape(summed, (n, c2))


def sparsity_concat(g: ValueGraph, f_u: SparseVoxelTensor, f_i: SparseVoxelTensor,
                    dec_cfg: DecoderConfig) -> SparseVoxelTensor:
    """Union both active sets, zero-fill the missing side, concat, and merge.

    Coordinates present on only one side contribute an exactly-zero feature
    row for the other before the 2*c2 -> c2 linear.
    """
    if f_u.level != f_i.level:
        raise ValueError(f"level mismatch: {f_u.level} != {f_i.level}")
    level = f_u.level
    c2 = dec_cfg.level_channels(level)
    res = align_union(f_u, f_i)
    n_union = len(res.coords)
    left = g.scatter_rows(f_u.features, res.rows_a, n_union)
    right = g.scatter_rows(f_i.features, res.rows_b, n_union)
    both = g.concat([left, right], axis=1)
    feats = g.linear(both, f"decoder.level{level}.concat")
    return SparseVoxelTensor(level, res.coords, feats, f_u.grid)


def sparsity_control(g: ValueGraph, f_t: SparseVoxelTensor, dec_cfg: DecoderConfig,
                     mode: str, pyramid: ExistencePyramid = None,
                     rng: np.random.Generator = None) -> LevelOutput:
    """Score every generated voxel and decide what survives to the next level.

    Inference keeps scores strictly above beta. Training propagates exactly
    the ground-truth-occupied generated voxels and draws the supervised set
    by capping empties at `empty_cap` of the batch (uniform subsampling
    from the provided generator).
    """
    level = f_t.level
    n = f_t.num_active
    logits = g.linear(f_t.features, f"decoder.level{level}.scm")
    scores = g.reshape(g.sigmoid(logits), (n,))
    if mode == "infer":
        kept = np.nonzero(scores.array > dec_cfg.beta)[0]
        return LevelOutput(level, f_t, scores=scores, kept_rows=kept)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got '{mode}'")
    if pyramid is None:
        raise ValueError("training mode requires ground-truth occupancy")
    labels = pyramid.contains(level, f_t.coords, f_t.grid).astype(np.float64)
    kept = np.nonzero(labels > 0.5)[0]
    pos = np.nonzero(labels > 0.5)[0]
    neg = np.nonzero(labels <= 0.5)[0]
    cap = int(np.floor(dec_cfg.empty_cap / (1.0 - dec_cfg.empty_cap) * len(pos)))
    if len(neg) > cap:
        if rng is None:
            raise ValueError("negative subsampling requires a seeded generator")
        neg = np.sort(rng.choice(neg, size=cap, replace=False))
    supervised = np.sort(np.concatenate([pos, neg]))
    total = len(supervised)
    ratio = float(len(neg) / total) if total else 0.0
    return LevelOutput(level, f_t, scores=scores, kept_rows=kept, labels=labels,
                       supervised_rows=supervised, empty_ratio=ratio)


def completion_loss(g: ValueGraph, outputs: list, num_levels: int) -> Var:
    """Average per-level mean smooth-L1 between scores and occupancy labels.

    Supervision covers levels 1..N-1; each level contributes the mean over
    its supervised (post-subsampling) voxels, and the sum is divided by N-1.
    """
    terms = []
    for out in outputs:
        if out.labels is None or out.level >= num_levels:
            continue
        rows = out.supervised_rows
        if len(rows) == 0:
            continue
        picked = g.take_rows(out.scores, rows)
        target = g.constant(out.labels[rows])
        terms.append(g.smooth_l1(picked, target))
    if not terms:
        return g.constant(np.asarray(0.0))
    return g.scale(g.add_n(terms), 1.0 / (num_levels - 1))


def joint_loss(g: ValueGraph, detection: Var, completion: Var, alpha: float) -> Var:
    if not (np.isfinite(detection.array) and np.isfinite(completion.array)):
        raise ValueError("joint_loss requires finite loss terms")
    return g.add(detection, g.scale(completion, float(alpha)))


def decoder_forward(g: ValueGraph, det_levels: list, dec_cfg: DecoderConfig,
                    mode: str, pyramid: ExistencePyramid = None,
                    rng: np.random.Generator = None) -> list:
    """Run the full decoder coarsest-to-finest.

    Returns LevelOutputs ordered coarsest first. The coarsest bridge carries
    no score head: in training its propagation is masked by ground-truth
    occupancy (scoring there would never receive loss, and no up-sampling
    happened yet), in inference it propagates every active voxel.
    """
    grid = det_levels[0].grid
    dec_cfg.validate(grid)
    n = grid.levels
    top = coarsest_bridge(g, det_levels[-1], dec_cfg)
    if mode == "train":
        if pyramid is None:
            raise ValueError("training mode requires ground-truth occupancy")
        kept = np.nonzero(pyramid.contains(n, top.coords, grid))[0]
    else:
        kept = np.arange(top.num_active)
    outputs = [LevelOutput(n, top, kept_rows=kept)]
    prev = top
    prev_kept = kept
    for level in range(n - 1, 0, -1):
        pruned = SparseVoxelTensor(prev.level, prev.coords[prev_kept],
                                   g.take_rows(prev.features, prev_kept), grid)
        f_u = upsample_bridge(g, pruned, dec_cfg)
        f_i = interpret_bridge(g, det_levels[level - 1], dec_cfg)
        f_t = sparsity_concat(g, f_u, f_i, dec_cfg)
        out = sparsity_control(g, f_t, dec_cfg, mode, pyramid, rng)
        outputs.append(out)
        prev = f_t
        prev_kept = out.kept_rows
    return outputs
