"""Self-supervised losses: appearance, sparse, left-right consistency, smoothness.

All functions work in the "left frame": disparity d maps left pixel (i, j)
to right-image column j - d. Right-image losses are obtained by calling the
same functions on horizontally flipped inputs. The occlusion map is boolean
and recomputed per step; gradients never flow through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .ndgrad import DiffArray, ShapeError
from .refine import SparseDisparity

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class DegenerateMaskError(ValueError):
    """A loss average was requested over an empty pixel set."""


@dataclass
class LossWeights:
    alpha: float = 0.85
    appearance: float = 1.0
    sparse: float = 0.5
    lr_consistency: float = 0.01
    smoothness: float = 0.01

    def __post_init__(self):
        for name in ("appearance", "sparse", "lr_consistency", "smoothness"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} weight must be >= 0")


def _sample_rows(rows: DiffArray, d: DiffArray) -> DiffArray:
    """Sample rows[..., W] at per-pixel column j - d(i, j), clamped."""
    h, w = d.shape
    cols = np.broadcast_to(np.arange(w, dtype=np.float64)[None, :], (h, w)).copy()
    return ng.gather_linear_lastdim(rows, ng.sub(ng.constant(cols), d))


def warp_right_to_left(image_r: DiffArray, d_l: DiffArray) -> DiffArray:
    """Reconstruct the left view by horizontal bilinear sampling of the right."""
    image_r, d_l = ng.as_diff(image_r), ng.as_diff(d_l)
    if image_r.ndim != 3 or image_r.shape[1:] != d_l.shape:
        raise ShapeError(f"image {image_r.shape} vs disparity {d_l.shape}")
    h, w = d_l.shape
    channels = []
    for c in range(image_r.shape[0]):
        row = ng.reshape(ng.slice_axis0(image_r, c, c + 1), (h, w))
        channels.append(ng.reshape(_sample_rows(row, d_l), (1, h, w)))
    return ng.concat_axis0(channels)


def warp_disparity_right_to_left(d_r: DiffArray, d_l: DiffArray) -> DiffArray:
    """Warp the right disparity field into the left view at j - d_l."""
    d_r, d_l = ng.as_diff(d_r), ng.as_diff(d_l)
    if d_r.shape != d_l.shape:
        raise ShapeError(f"disparity shapes differ: {d_r.shape} vs {d_l.shape}")
    return _sample_rows(d_r, d_l)


def occlusion_from_range(d_l: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Forward-splat collision test: a left pixel is occluded when another
    left pixel with strictly larger disparity lands within ``threshold`` px
    of the same right-view column. Boolean, non-differentiable."""
    d = np.asarray(d_l, dtype=np.float64)
    h, w = d.shape
    x = np.arange(w, dtype=np.float64)[None, :] - d  # right-view columns
    occluded = np.zeros((h, w), dtype=bool)
    for i in range(h):
        close = np.abs(x[i][None, :] - x[i][:, None]) < threshold
        nearer = d[i][None, :] > d[i][:, None]
        occluded[i] = np.any(close & nearer, axis=1)
    return occluded


def masked_mean(values: DiffArray, keep: np.ndarray) -> DiffArray:
    """Mean of values over True positions of ``keep``; errors when empty."""
    n = int(keep.sum())
    if n == 0:
        raise DegenerateMaskError("no pixels left after masking")
    weighted = ng.mul(values, ng.constant(keep.astype(np.float64)))
    return ng.mul(ng.total(weighted), 1.0 / n)


def ssim(x: DiffArray, y: DiffArray) -> DiffArray:
    """Per-pixel SSIM with 3x3 box windows and standard stabilizers."""
    x, y = ng.as_diff(x), ng.as_diff(y)
    if x.shape != y.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {y.shape}")
    mu_x, mu_y = ng.mean3x3(x), ng.mean3x3(y)
    var_x = ng.sub(ng.mean3x3(ng.mul(x, x)), ng.mul(mu_x, mu_x))
    var_y = ng.sub(ng.mean3x3(ng.mul(y, y)), ng.mul(mu_y, mu_y))
    cov = ng.sub(ng.mean3x3(ng.mul(x, y)), ng.mul(mu_x, mu_y))
    lum = ng.div(ng.add(ng.mul(ng.mul(mu_x, mu_y), 2.0), SSIM_C1),
                 ng.add(ng.add(ng.mul(mu_x, mu_x), ng.mul(mu_y, mu_y)), SSIM_C1))
    con = ng.div(ng.add(ng.mul(cov, 2.0), SSIM_C2),
                 ng.add(ng.add(var_x, var_y), SSIM_C2))
    return ng.mul(lum, con)


def _channel_mean(x: DiffArray) -> DiffArray:
    return ng.mul(ng.sum_axis(x, 0), 1.0 / x.shape[0])


def appearance_loss(image_l: DiffArray, recon_l: DiffArray,
                    occlusion: np.ndarray, alpha: float = 0.85) -> DiffArray:
    """SSIM/L1 photometric mismatch, averaged over non-occluded pixels."""
    dssim = _channel_mean(ng.mul(ng.sub(1.0, ssim(image_l, recon_l)), 0.5))
    l1 = _channel_mean(ng.absval(ng.sub(image_l, recon_l)))
    per_pixel = ng.add(ng.mul(dssim, alpha), ng.mul(l1, 1.0 - alpha))
    return masked_mean(per_pixel, ~occlusion)


def sparse_loss(sparse: SparseDisparity, d_hat: DiffArray) -> DiffArray:
    """Mean absolute disparity error at the valid seed positions."""
    if sparse.count == 0:
        raise DegenerateMaskError("sparse loss needs at least one valid point")
    diff = ng.absval(ng.sub(ng.constant(sparse.values), d_hat))
    return masked_mean(diff, sparse.valid)


def lr_consistency_loss(d_l: DiffArray, d_r: DiffArray,
                        occlusion: np.ndarray) -> DiffArray:
    """Masked mean absolute difference between d_l and the warped d_r."""
    warped = warp_disparity_right_to_left(d_r, d_l)
    return masked_mean(ng.absval(ng.sub(warped, d_l)), ~occlusion)


def _second_diff(d: DiffArray, axis: int) -> DiffArray:
    """Horizontal/vertical second difference, zero on the affected borders."""
    h, w = d.shape
    out = np.zeros((h, w))
    if axis == 1:
        out[:, 1:-1] = d.data[:, :-2] - 2.0 * d.data[:, 1:-1] + d.data[:, 2:]
    else:
        out[1:-1, :] = d.data[:-2, :] - 2.0 * d.data[1:-1, :] + d.data[2:, :]

    def backward(g):
        gd = np.zeros((h, w))
        if axis == 1:
            gi = g[:, 1:-1]
            gd[:, :-2] += gi
            gd[:, 1:-1] -= 2.0 * gi
            gd[:, 2:] += gi
        else:
            gi = g[1:-1, :]
            gd[:-2, :] += gi
            gd[1:-1, :] -= 2.0 * gi
            gd[2:, :] += gi
        return (gd,)

    return ng.record(out, (d,), backward)


def _edge_weights(image: np.ndarray, axis: int) -> np.ndarray:
    curv = np.zeros(image.shape[1:])
    data = np.abs(np.diff(np.diff(image, axis=axis), axis=axis)).mean(axis=0)
    if axis == 2:
        curv[:, 1:-1] = data
    else:
        curv[1:-1, :] = data
    return np.exp(-curv)


def smooth_loss(d_l: DiffArray, image_l: np.ndarray,
                occlusion: np.ndarray) -> DiffArray:
    """Edge-weighted second-order smoothness of the disparity field."""
    d_l = ng.as_diff(d_l)
    image = np.asarray(image_l.data if isinstance(image_l, DiffArray) else image_l)
    wx = ng.constant(_edge_weights(image, axis=2))
    wy = ng.constant(_edge_weights(image, axis=1))
    term = ng.add(ng.mul(ng.absval(_second_diff(d_l, 1)), wx),
                  ng.mul(ng.absval(_second_diff(d_l, 0)), wy))
    return masked_mean(term, ~occlusion)


def total_loss(terms: dict, weights: LossWeights) -> DiffArray:
    """Weighted sum of one side's loss terms (missing terms count as 0)."""
    pairs = (("appearance", weights.appearance), ("sparse", weights.sparse),
             ("lr_consistency", weights.lr_consistency),
             ("smoothness", weights.smoothness))
    out = ng.constant(0.0)
    for name, beta in pairs:
        if name in terms and terms[name] is not None:
            out = ng.add(out, ng.mul(terms[name], beta))
    return out


def combine_sides(loss_left: DiffArray, loss_right: DiffArray) -> DiffArray:
    return ng.mul(ng.add(loss_left, loss_right), 0.5)
