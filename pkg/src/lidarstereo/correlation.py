"""Correlation map, pooled pyramid, and per-pixel lookup.

The map holds, for every left pixel (i,j), the channel dot product with
every right pixel (i,k) of the same row. The pyramid halves the right-
column axis by stride-2 average pooling; lookup samples a small radius
around the current disparity at every level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .ndgrad import DiffArray, ShapeError


@dataclass
class LookupConfig:
    """Radius and level count for correlation lookup."""
    radius: int = 4
    levels: int = 4

    def __post_init__(self):
        if self.radius < 1 and self.radius != 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")

    @property
    def channels(self):
        return self.levels * (2 * self.radius + 1)


@dataclass
class CorrelationPyramid:
    """Pooled correlation levels; level k has shape [H, W, W_pad / 2^k]."""
    levels: list
    width: int  # unpadded right-column extent of level 0

    @property
    def shape_hw(self):
        h, w, _ = self.levels[0].shape
        return h, w


def build_correlation(f_left: DiffArray, f_right: DiffArray) -> DiffArray:
    """All-pairs row-wise feature dot products: out[i,j,k] = <f_l[:,i,j], f_r[:,i,k]>."""
    f_left, f_right = ng.as_diff(f_left), ng.as_diff(f_right)
    if f_left.shape != f_right.shape:
        raise ShapeError(f"feature shapes differ: {f_left.shape} vs {f_right.shape}")
    if f_left.ndim != 3:
        raise ShapeError(f"expected [C,H,W] features, got {f_left.shape}")
    out = np.einsum("cij,cik->ijk", f_left.data, f_right.data, optimize=True)

    def backward(g):
        gl = np.einsum("ijk,cik->cij", g, f_right.data, optimize=True)
        gr = np.einsum("ijk,cij->cik", g, f_left.data, optimize=True)
        return (gl, gr)

    return ng.record(out, (f_left, f_right), backward)


def build_pyramid(corr: DiffArray, cfg: LookupConfig) -> CorrelationPyramid:
    """Average-pool the last dim L-1 times; odd widths are edge-padded first."""
    corr = ng.as_diff(corr)
    width = corr.shape[-1]
    block = 2 ** (cfg.levels - 1)
    pad = (-width) % block
    level = ng.pad_lastdim_edge(corr, pad)
    levels = [level]
    for _ in range(cfg.levels - 1):
        level = ng.avgpool_lastdim(level)
        levels.append(level)
    return CorrelationPyramid(levels=levels, width=width)


def lookup(pyr: CorrelationPyramid, disparity: DiffArray,
           cfg: LookupConfig) -> DiffArray:
    """Sample the pyramid around the current disparity.

    For pixel (i,j), level k, offset delta in [-r, r], the sampled last-dim
    coordinate is (j - d(i,j)) / 2^k + delta. Channel order is level-major,
    offset-minor. Output shape [L*(2r+1), H, W].
    """
    disparity = ng.as_diff(disparity)
    h, w = pyr.shape_hw
    if disparity.shape != (h, w):
        raise ShapeError(f"disparity shape {disparity.shape} != pyramid {(h, w)}")
    cols = np.arange(w, dtype=np.float64)[None, :]  # left-pixel column index
    center = ng.sub(ng.constant(np.broadcast_to(cols, (h, w)).copy()), disparity)
    chunks = []
    for k, level in enumerate(pyr.levels):
        scaled = ng.mul(center, 1.0 / (2 ** k))
        for delta in range(-cfg.radius, cfg.radius + 1):
            coord = ng.add(scaled, float(delta))
            chunks.append(ng.reshape(ng.gather_linear_lastdim(level, coord),
                                     (1, h, w)))
    return ng.concat_axis0(chunks)
