"""Toy-scale feature network, context network, and affinity head.

Both networks share one backbone layout: three 3x3 convs (strided to reach
the coarse resolution), one residual block, and a 1x1 projection. The
context network adds heads for the GRU context, the tanh-bounded initial
hidden state, and the raw 8-neighbor affinity map.

Parameters live in an ordered dict of name -> DiffArray leaf; the same
dict serializes to a flat little-endian float64 blob with a JSON sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from .ndgrad import DiffArray, ShapeError

# Raw affinity channel c maps to neighbor offset AFFINITY_OFFSETS[c]:
# row-major over (di, dj) in {-1,0,1}^2 with (0,0) removed.
AFFINITY_OFFSETS = tuple(o for o in ng.NEIGHBOR_OFFSETS if o != (0, 0))


@dataclass
class ContextBundle:
    """Per-image context for the iterative stage, all at coarse resolution."""
    context: DiffArray      # [C_ctx, H, W]
    hidden_init: DiffArray  # [C_h, H, W], values in (-1, 1)
    affinity: DiffArray     # [8, H, W], raw (unnormalized, signed)


def init_conv(params, name, c_out, c_in, k, rng, zero=False):
    """Register a conv weight/bias pair; centered-uniform fan-in scaling."""
    if zero:
        w = np.zeros((c_out, c_in, k, k))
    else:
        bound = np.sqrt(1.0 / (c_in * k * k))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
    params[f"{name}.w"] = ng.leaf(w)
    params[f"{name}.b"] = ng.leaf(np.zeros(c_out))


def conv(params, name, x, stride=1, padding=None):
    w = params[f"{name}.w"]
    if padding is None:
        padding = w.shape[-1] // 2
    return ng.conv2d(x, w, bias=params[f"{name}.b"], stride=stride,
                     padding=padding)


_POOLS = {4: (True, True, False), 8: (True, True, True)}


def init_backbone(params, prefix, c_out, rng, downsample):
    if downsample not in _POOLS:
        raise ValueError(f"downsample must be 4 or 8, got {downsample}")
    init_conv(params, f"{prefix}.conv1", c_out, 3, 3, rng)
    init_conv(params, f"{prefix}.conv2", c_out, c_out, 3, rng)
    init_conv(params, f"{prefix}.conv3", c_out, c_out, 3, rng)
    init_conv(params, f"{prefix}.res_a", c_out, c_out, 3, rng)
    init_conv(params, f"{prefix}.res_b", c_out, c_out, 3, rng)


def residual_block(params, prefix, x):
    y = conv(params, f"{prefix}_b", ng.relu(conv(params, f"{prefix}_a", x)))
    return ng.relu(ng.add(x, y))


def run_backbone(params, prefix, image, downsample):
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected [3,H,W] image, got {image.shape}")
    _, h, w = image.shape
    if h % downsample or w % downsample:
        raise ShapeError(f"image {h}x{w} not divisible by downsample {downsample}")
    x = image
    # downsampling stages: stride-1 conv + 2x2 mean pool (conv2d requires
    # exact output sizes, which rules out 3x3 stride-2 on even inputs)
    for stage, pool in zip(("conv1", "conv2", "conv3"), _POOLS[downsample]):
        x = ng.relu(conv(params, f"{prefix}.{stage}", x))
        if pool:
            x = ng.avgpool2d(x)
    return residual_block(params, f"{prefix}.res", x)


def init_feature_net(params, channels, rng, downsample):
    init_backbone(params, "feat", channels, rng, downsample)
    init_conv(params, "feat.proj", channels, channels, 1, rng)


def extract_features(image, params, downsample=4):
    """Coarse feature map [C, H0/s, W0/s]; weights shared across views."""
    trunk = run_backbone(params, "feat", image, downsample)
    return conv(params, "feat.proj", trunk)


def init_context_net(params, ctx_channels, hidden_channels, rng, downsample):
    init_backbone(params, "ctx", ctx_channels, rng, downsample)
    init_conv(params, "ctx.head_ctx", ctx_channels, ctx_channels, 1, rng)
    init_conv(params, "ctx.head_hidden", hidden_channels, ctx_channels, 1, rng)
    init_conv(params, "ctx.aff_res_a", ctx_channels, ctx_channels, 3, rng)
    init_conv(params, "ctx.aff_res_b", ctx_channels, ctx_channels, 3, rng)
    init_conv(params, "ctx.aff_head", 8, ctx_channels, 1, rng)


def extract_context(image, params, downsample=4) -> ContextBundle:
    """Context, initial GRU hidden state, and raw affinity map."""
    trunk = run_backbone(params, "ctx", image, downsample)
    context = ng.relu(conv(params, "ctx.head_ctx", trunk))
    hidden = ng.tanh(conv(params, "ctx.head_hidden", trunk))
    aff_trunk = residual_block(params, "ctx.aff_res", trunk)
    affinity = conv(params, "ctx.aff_head", aff_trunk)
    return ContextBundle(context=context, hidden_init=hidden, affinity=affinity)


# ---------------------------------------------------------------------------
# checkpoint IO


def save_params(params: dict, path):
    """Write a flat little-endian float64 blob plus a JSON shape sidecar."""
    path = Path(path)
    names = list(params.keys())
    blob = np.concatenate([params[n].data.reshape(-1) for n in names])
    path.write_bytes(blob.astype("<f8").tobytes())
    sidecar = [{"name": n, "shape": list(params[n].shape)} for n in names]
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))


def load_params(path) -> dict:
    """Read a checkpoint written by :func:`save_params` into leaf arrays."""
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer(path.read_bytes(), dtype="<f8")
    params = {}
    offset = 0
    for entry in sidecar:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        params[entry["name"]] = ng.leaf(blob[offset:offset + n].reshape(shape))
        offset += n
    if offset != blob.size:
        raise ValueError(f"checkpoint size mismatch: sidecar wants {offset} "
                         f"values, blob has {blob.size}")
    return params
