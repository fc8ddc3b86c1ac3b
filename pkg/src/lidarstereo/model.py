"""Full network assembly: stereo pair + sparse seeds -> dense disparity."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import ndgrad as ng
from .correlation import LookupConfig
from .features import (extract_context, extract_features, init_context_net,
                       init_feature_net, load_params, save_params)
from .ndgrad import DiffArray
from .refine import (RefineConfig, SparseDisparity, apply_anchor,
                     convex_upsample, init_refine_params, iterate,
                     project_sparse, upsample_mask)


@dataclass
class ModelConfig:
    feat_channels: int = 32
    ctx_channels: int = 32
    hidden_channels: int = 32
    motion_channels: int = 32
    downsample: int = 4
    gru_levels: int = 2
    gru_iters: int = 10
    cspn_iters: int = 10
    lookup_radius: int = 4
    lookup_levels: int = 4
    use_cspn: bool = True
    use_sparse: bool = True
    epsilon_norm: float = 1e-8

    def lookup_config(self):
        return LookupConfig(radius=self.lookup_radius, levels=self.lookup_levels)

    def refine_config(self, gru_iters=None):
        return RefineConfig(
            gru_iters=self.gru_iters if gru_iters is None else gru_iters,
            cspn_iters=self.cspn_iters, epsilon_norm=self.epsilon_norm,
            lookup=self.lookup_config())

    def to_dict(self):
        return asdict(self)


@dataclass
class ForwardResult:
    coarse: list                 # [d_0 .. d_K] at coarse resolution
    disparity: DiffArray         # full-resolution final estimate
    hidden: DiffArray            # final coarse GRU state
    sparse_coarse: SparseDisparity


class StereoModel:
    """Holds parameters and runs the sparse-assisted refinement pipeline."""

    def __init__(self, config: ModelConfig = None, params: dict = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed):
        cfg = self.config
        rng = np.random.default_rng(seed)
        params = {}
        init_feature_net(params, cfg.feat_channels, rng, cfg.downsample)
        init_context_net(params, cfg.ctx_channels, cfg.hidden_channels, rng,
                         cfg.downsample)
        init_refine_params(
            params, rng, hidden_channels=cfg.hidden_channels,
            ctx_channels=cfg.ctx_channels, motion_channels=cfg.motion_channels,
            lookup_channels=cfg.lookup_config().channels,
            gru_levels=cfg.gru_levels, upsample_factor=cfg.downsample)
        return params

    def forward(self, image_l, image_r, sparse: SparseDisparity = None,
                gru_iters: int = None) -> ForwardResult:
        """Run the pipeline; sparse seeds are given at full resolution."""
        cfg = self.config
        image_l, image_r = ng.as_diff(image_l), ng.as_diff(image_r)
        _, h0, w0 = image_l.shape
        if sparse is None or not cfg.use_sparse:
            sparse = SparseDisparity.empty((h0, w0))
        feat_l = extract_features(image_l, self.params, cfg.downsample)
        feat_r = extract_features(image_r, self.params, cfg.downsample)
        ctx = extract_context(image_l, self.params, cfg.downsample)
        sparse_coarse = project_sparse(sparse, cfg.downsample)
        states, hidden = iterate(
            feat_l, feat_r, ctx, sparse_coarse, self.params,
            cfg.refine_config(gru_iters), gru_levels=cfg.gru_levels,
            use_cspn=cfg.use_cspn, use_sparse=cfg.use_sparse)
        mask = upsample_mask(self.params, hidden)
        full = convex_upsample(states[-1], mask, cfg.downsample)
        if cfg.use_sparse:
            # the dense output holds the seed disparities exactly, which is
            # also what masks the sparse loss out of backprop when the loss
            # set equals the input set
            full = apply_anchor(full, sparse)
        return ForwardResult(coarse=states, disparity=full, hidden=hidden,
                             sparse_coarse=sparse_coarse)

    def predict(self, image_l, image_r, sparse: SparseDisparity = None,
                gru_iters: int = None) -> np.ndarray:
        """Inference without gradient recording; returns a numpy map."""
        return self.forward(image_l, image_r, sparse, gru_iters).disparity.data

    def forward_right(self, image_l, image_r, gru_iters: int = None):
        """Right-view disparity via the horizontal flip trick (no seeds)."""
        flipped = self.forward(ng.flip_lastdim(ng.as_diff(image_r)),
                               ng.flip_lastdim(ng.as_diff(image_l)),
                               sparse=None, gru_iters=gru_iters)
        return ng.flip_lastdim(flipped.disparity)

    def save(self, path):
        save_params(self.params, path)

    @classmethod
    def load(cls, path, config: ModelConfig = None):
        return cls(config=config, params=load_params(path))
