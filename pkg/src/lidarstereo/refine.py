"""Iterative disparity refinement.

Each iteration looks up the correlation pyramid at the current estimate,
runs a convolutional GRU to produce a disparity delta, then diffuses the
result by convolutional spatial propagation (CSPN) whose per-pixel kernel
comes from the context network. After every propagation step the sparse
seed values are re-imposed at their valid positions, so anchored pixels
hold their LiDAR disparity bit-exactly throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .correlation import LookupConfig, build_correlation, build_pyramid, lookup
from .ndgrad import DiffArray, ShapeError
from .features import AFFINITY_OFFSETS, ContextBundle, conv, init_conv

# slot of each raw affinity channel inside the 9-channel normalized map
_RAW_TO_SLOT = tuple(ng.NEIGHBOR_OFFSETS.index(o) for o in AFFINITY_OFFSETS)
_NEIGHBOR_SLOTS = _RAW_TO_SLOT  # all slots except the center (index 4)


@dataclass
class SparseDisparity:
    """Per-pixel disparity seeds: values are 0 and never read where invalid."""
    values: np.ndarray  # float [H,W], > 0 at valid positions
    valid: np.ndarray   # bool  [H,W]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ShapeError(f"values {self.values.shape} vs valid "
                             f"{self.valid.shape}")
        if np.any(self.values[~self.valid] != 0.0):
            raise ValueError("values must be exactly 0 at invalid positions")

    @property
    def count(self):
        return int(self.valid.sum())

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape, dtype=bool))


@dataclass
class RefineConfig:
    gru_iters: int = 10
    cspn_iters: int = 10
    epsilon_norm: float = 1e-8
    lookup: LookupConfig = field(default_factory=LookupConfig)

    def __post_init__(self):
        if self.gru_iters < 0 or self.cspn_iters < 1:
            raise ValueError("iteration counts must be positive")


def normalize_affinity(affinity: DiffArray, eps: float = 1e-8) -> DiffArray:
    """Abs-sum normalization of raw affinities, center = 1 - neighbor sum.

    Input is the raw [8,H,W] map; output is [9,H,W] ordered row-major over
    the 3x3 offsets with the center (d_0 coefficient) at index 4. The nine
    channels sum to exactly 1 per pixel.
    """
    affinity = ng.as_diff(affinity)
    if affinity.ndim != 3 or affinity.shape[0] != 8:
        raise ShapeError(f"expected [8,H,W] raw affinity, got {affinity.shape}")
    a = affinity.data
    denom = np.sum(np.abs(a), axis=0) + eps
    neighbors = a / denom
    h, w = denom.shape
    out = np.zeros((9, h, w))
    for c, slot in enumerate(_RAW_TO_SLOT):
        out[slot] = neighbors[c]
    out[ng.CENTER_INDEX] = 1.0 - neighbors.sum(axis=0)

    def backward(g):
        e = np.stack([g[slot] for slot in _RAW_TO_SLOT]) - g[ng.CENTER_INDEX]
        dot = np.sum(e * a, axis=0)
        return (e / denom - np.sign(a) * dot / denom ** 2,)

    return ng.record(out, (affinity,), backward)


def apply_anchor(d: DiffArray, sparse: SparseDisparity) -> DiffArray:
    """Overwrite d with the seed values at valid positions."""
    if sparse.count == 0:
        return d
    keep = ng.constant((~sparse.valid).astype(np.float64))
    seeds = ng.constant(sparse.values * sparse.valid)
    return ng.add(ng.mul(d, keep), seeds)


def cspn_propagate(d_in: DiffArray, norm_affinity: DiffArray,
                   sparse: SparseDisparity, t_max: int) -> DiffArray:
    """t_max diffusion steps; seeds re-imposed after every step.

    Each step: d <- A_center * d_in + sum over 8 neighbors of
    A_nb * shifted d (edge-replicated neighbor access).
    """
    d_in = ng.as_diff(d_in)
    h, w = d_in.shape
    if norm_affinity.shape != (9, h, w):
        raise ShapeError(f"affinity {norm_affinity.shape} vs field {(h, w)}")
    d0 = ng.reshape(d_in, (1, h, w))
    d = d_in
    for _ in range(t_max):
        nb = ng.neighbors3x3(d)
        mixed = ng.concat_axis0([ng.slice_axis0(nb, 0, 4), d0,
                                 ng.slice_axis0(nb, 5, 9)])
        d = ng.sum_axis(ng.mul(norm_affinity, mixed), 0)
        d = apply_anchor(d, sparse)
    return d


def project_sparse(sparse_full: SparseDisparity, s: int) -> SparseDisparity:
    """Pool full-resolution seeds into coarse s-by-s cells.

    A coarse cell is valid when any contributing point is; its value is the
    mean contributing disparity divided by s (coarse-pixel units).
    """
    h0, w0 = sparse_full.values.shape
    if h0 % s or w0 % s:
        raise ShapeError(f"{h0}x{w0} not divisible by block {s}")
    h, w = h0 // s, w0 // s
    counts = sparse_full.valid.reshape(h, s, w, s).sum(axis=(1, 3))
    sums = (sparse_full.values * sparse_full.valid).reshape(h, s, w, s).sum(axis=(1, 3))
    valid = counts > 0
    values = np.zeros((h, w))
    values[valid] = sums[valid] / counts[valid] / s
    return SparseDisparity(values=values, valid=valid)


# ---------------------------------------------------------------------------
# GRU update stage


def init_refine_params(params, rng, *, hidden_channels, ctx_channels,
                       motion_channels, lookup_channels, gru_levels,
                       upsample_factor):
    if not 1 <= gru_levels <= 3:
        raise ValueError(f"gru_levels must be in 1..3, got {gru_levels}")
    init_conv(params, "motion.enc1", motion_channels, lookup_channels + 1, 3, rng)
    init_conv(params, "motion.enc2", motion_channels, motion_channels, 3, rng)
    x_channels = motion_channels + ctx_channels
    for lvl in range(gru_levels):
        c_in = hidden_channels + x_channels
        if lvl + 1 < gru_levels:
            c_in += hidden_channels  # upsampled state from the coarser level
        for gate in ("z", "r", "q"):
            init_conv(params, f"gru{lvl}.{gate}", hidden_channels, c_in, 3, rng)
    init_conv(params, "delta.c1", hidden_channels, hidden_channels, 3, rng)
    init_conv(params, "delta.c2", 1, hidden_channels, 3, rng)
    init_conv(params, "mask.c1", hidden_channels, hidden_channels, 3, rng)
    init_conv(params, "mask.c2", 9 * upsample_factor ** 2, hidden_channels, 1, rng)


def _gru_cell(params, prefix, hidden, x):
    inp = ng.concat_axis0([hidden, x])
    z = ng.sigmoid(conv(params, f"{prefix}.z", inp))
    r = ng.sigmoid(conv(params, f"{prefix}.r", inp))
    q = ng.tanh(conv(params, f"{prefix}.q", ng.concat_axis0([ng.mul(r, hidden), x])))
    return ng.add(ng.mul(ng.sub(1.0, z), hidden), ng.mul(z, q))


def gru_update(params, hiddens, lookup_feats, disparity, context):
    """One multi-level GRU step; returns (delta [H,W], new hidden list).

    hiddens[0] is the coarse level; deeper entries live at successively
    halved resolutions and are updated first, feeding the finer levels.
    """
    h, w = disparity.shape
    motion_in = ng.concat_axis0([lookup_feats, ng.reshape(disparity, (1, h, w))])
    motion = ng.relu(conv(params, "motion.enc2",
                          ng.relu(conv(params, "motion.enc1", motion_in))))
    x = ng.concat_axis0([motion, context])
    xs = [x]
    for _ in range(len(hiddens) - 1):
        xs.append(ng.avgpool2d(xs[-1]))
    new_hiddens = list(hiddens)
    for lvl in range(len(hiddens) - 1, -1, -1):
        inp = xs[lvl]
        if lvl + 1 < len(hiddens):
            inp = ng.concat_axis0([inp, ng.upsample2x(new_hiddens[lvl + 1])])
        new_hiddens[lvl] = _gru_cell(params, f"gru{lvl}", new_hiddens[lvl], inp)
    delta_feat = ng.relu(conv(params, "delta.c1", new_hiddens[0]))
    delta = ng.reshape(conv(params, "delta.c2", delta_feat), (h, w))
    return delta, new_hiddens


def init_hiddens(hidden_init, gru_levels):
    hiddens = [hidden_init]
    for _ in range(gru_levels - 1):
        hiddens.append(ng.avgpool2d(hiddens[-1]))
    return hiddens


def iterate(feat_left, feat_right, ctx: ContextBundle, sparse: SparseDisparity,
            params, cfg: RefineConfig, *, gru_levels=2, use_cspn=True,
            use_sparse=True):
    """Run the refinement loop; returns (list of coarse disparities, hidden).

    The initial field is zero, anchored, and CSPN-propagated once before the
    first GRU step. The returned list holds the post-propagation disparity
    of every iteration (the anchored initial state when gru_iters == 0).
    """
    h, w = feat_left.shape[1:]
    if not use_sparse:
        sparse = SparseDisparity.empty((h, w))
    pyr = build_pyramid(build_correlation(feat_left, feat_right), cfg.lookup)
    norm_aff = normalize_affinity(ctx.affinity, cfg.epsilon_norm) if use_cspn else None

    def settle(d):
        if use_cspn:
            return cspn_propagate(d, norm_aff, sparse, cfg.cspn_iters)
        return apply_anchor(d, sparse)

    d = settle(apply_anchor(ng.constant(np.zeros((h, w))), sparse))
    hiddens = init_hiddens(ctx.hidden_init, gru_levels)
    states = [d]
    for _ in range(cfg.gru_iters):
        feats = lookup(pyr, d, cfg.lookup)
        delta, hiddens = gru_update(params, hiddens, feats, d, ctx.context)
        d = settle(ng.add(d, delta))
        states.append(d)
    return states, hiddens[0]


# ---------------------------------------------------------------------------
# convex upsampling


def _convex_combine(weights: DiffArray, neighbors: DiffArray) -> DiffArray:
    """out[k] = sum_n weights[n,k] * neighbors[n] for [9,K,H,W] x [9,H,W]."""
    out = np.einsum("nkij,nij->kij", weights.data, neighbors.data, optimize=True)

    def backward(g):
        gw = np.einsum("kij,nij->nkij", g, neighbors.data, optimize=True)
        gn = np.einsum("nkij,kij->nij", weights.data, g, optimize=True)
        return (gw, gn)

    return ng.record(out, (weights, neighbors), backward)


def _pixel_shuffle(x: DiffArray, s: int) -> DiffArray:
    """[s*s,H,W] -> [H*s,W*s]; fine pixel (i*s+u, j*s+v) = x[u*s+v, i, j]."""
    _, h, w = x.shape
    out = x.data.reshape(s, s, h, w).transpose(2, 0, 3, 1).reshape(h * s, w * s)

    def backward(g):
        return (g.reshape(h, s, w, s).transpose(1, 3, 0, 2).reshape(s * s, h, w),)

    return ng.record(out, (x,), backward)


def convex_upsample(d: DiffArray, mask_logits: DiffArray, s: int) -> DiffArray:
    """Softmax-weighted 3x3 convex combination, upsampled and rescaled by s."""
    d = ng.as_diff(d)
    h, w = d.shape
    if mask_logits.shape != (9 * s * s, h, w):
        raise ShapeError(f"mask logits {mask_logits.shape} vs expected "
                         f"{(9 * s * s, h, w)}")
    weights = ng.softmax_axis(ng.reshape(mask_logits, (9, s * s, h, w)), 0)
    combined = _convex_combine(weights, ng.neighbors3x3(d))
    return ng.mul(_pixel_shuffle(combined, s), float(s))


def upsample_mask(params, hidden):
    return conv(params, "mask.c2", ng.relu(conv(params, "mask.c1", hidden)))
