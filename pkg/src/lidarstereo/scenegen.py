"""Synthetic stereo + LiDAR scenes with exact ground truth, plus file IO.

Scenes are stacks of fronto-parallel textured rectangles over a textured
background. Every layer carries one disparity, so the right image is an
exact per-layer shift of the left and occlusion geometry is known in
closed form. With integer layer disparities (the default) the rendered
pair is photometrically consistent to the bit at every valid pixel.

File formats: binary PPM (P6) for images, PFM (little-endian, bottom-up)
for float maps, CSV rows "i,j,disparity" for sparse points, JSON for
metrics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .refine import SparseDisparity


class SceneConfigError(ValueError):
    """Scene configuration violates its invariants."""


class ParseError(ValueError):
    """Malformed artifact file; carries the offending byte offset or row."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None
                         else f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 96
    focal: float = 100.0       # pixels
    baseline: float = 0.5      # meters
    layers: int = 3            # background plus layers-1 rectangles
    d_min: float = 2.0
    d_max: float = 12.0
    integer_disparities: bool = True

    def __post_init__(self):
        if self.focal <= 0 or self.baseline <= 0:
            raise SceneConfigError("focal and baseline must be positive")
        if not 0 < self.d_min <= self.d_max:
            raise SceneConfigError("need 0 < d_min <= d_max")
        if self.d_max >= self.width / 2:
            raise SceneConfigError(f"d_max {self.d_max} must be < width/2")
        if self.layers < 1:
            raise SceneConfigError("need at least one layer")


@dataclass
class StereoSample:
    image_left: np.ndarray    # [3,H,W] in [0,1]
    image_right: np.ndarray   # [3,H,W] in [0,1]
    gt_disparity: np.ndarray  # [H,W]
    gt_valid: np.ndarray      # bool [H,W]


def _texture(rng, h, w, period=8):
    """Band-limited noise plus gradients; pure noise aliases under sampling."""
    gh, gw = h // period + 2, w // period + 2
    coarse = rng.uniform(0.0, 1.0, size=(3, gh, gw))
    yi = np.arange(h) / period
    xi = np.arange(w) / period
    y0 = np.floor(yi).astype(int)
    x0 = np.floor(xi).astype(int)
    fy = (yi - y0)[None, :, None]
    fx = (xi - x0)[None, None, :]
    c00 = coarse[:, y0][:, :, x0]
    c01 = coarse[:, y0][:, :, x0 + 1]
    c10 = coarse[:, y0 + 1][:, :, x0]
    c11 = coarse[:, y0 + 1][:, :, x0 + 1]
    tex = (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx +
           c10 * fy * (1 - fx) + c11 * fy * fx)
    slope = rng.uniform(-0.3, 0.3, size=(3, 1, 1))
    tex = 0.55 * tex + 0.25 * slope * (xi[None, None, :] / max(w - 1, 1)) + 0.2
    return np.clip(tex, 0.02, 0.98)


def generate_scene(cfg: SceneConfig, seed: int) -> StereoSample:
    """Render one stereo pair with exact disparity and validity maps."""
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    pad = int(np.ceil(cfg.d_max)) + 2
    disparities = np.sort(rng.uniform(cfg.d_min, cfg.d_max, size=cfg.layers))
    if cfg.integer_disparities:
        disparities = np.round(disparities)
    layers = []
    for idx, d in enumerate(disparities):
        if idx == 0:
            rows, cols = (0, h), (0, w)  # background fills the view
        else:
            rh = int(rng.integers(h // 4, max(h // 2, h // 4 + 1)))
            rw = int(rng.integers(w // 4, max(w // 2, w // 4 + 1)))
            r0 = int(rng.integers(0, h - rh + 1))
            c0 = int(rng.integers(0, w - rw + 1))
            rows, cols = (r0, r0 + rh), (c0, c0 + rw)
        layers.append({"d": float(d), "rows": rows, "cols": cols,
                       "tex": _texture(rng, h, w + 2 * pad)})

    def covers_left(layer, i, x):
        r, c = layer["rows"], layer["cols"]
        return (r[0] <= i) & (i < r[1]) & (c[0] <= x) & (x < c[1])

    ii = np.arange(h)[:, None]
    jj = np.arange(w)[None, :]

    # left image: per-pixel topmost (largest-disparity) covering layer
    image_left = np.zeros((3, h, w))
    gt_disparity = np.zeros((h, w))
    top_left = np.full((h, w), -1)
    for idx, layer in enumerate(layers):  # ascending disparity; later wins
        mask = covers_left(layer, ii, jj)
        image_left[:, mask] = layer["tex"][:, mask.nonzero()[0],
                                           mask.nonzero()[1] + pad]
        gt_disparity[mask] = layer["d"]
        top_left[mask] = idx

    # right image: layer idx covers right column j where the left column
    # j + d falls inside its rectangle
    image_right = np.zeros((3, h, w))
    top_right = np.full((h, w), -1)
    for idx, layer in enumerate(layers):
        x_left = jj + layer["d"]
        mask = covers_left(layer, ii, np.round(x_left) if cfg.integer_disparities
                           else x_left)
        rowsel, colsel = mask.nonzero()
        xs = colsel + layer["d"] + pad
        x0 = np.floor(xs).astype(int)
        f = xs - x0
        image_right[:, rowsel, colsel] = (layer["tex"][:, rowsel, x0] * (1 - f) +
                                          layer["tex"][:, rowsel, x0 + 1] * f)
        top_right[rowsel, colsel] = idx

    # validity: the matching right pixel must exist and show the same layer
    x_match = jj - gt_disparity
    in_view = x_match >= 0
    gt_valid = in_view.copy()
    xs = np.clip(x_match, 0, w - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    same0 = top_right[ii, x0] == top_left
    same1 = top_right[ii, x1] == top_left
    frac = xs - x0
    gt_valid &= np.where(frac > 0, same0 & same1, same0)
    return StereoSample(image_left=image_left, image_right=image_right,
                        gt_disparity=gt_disparity, gt_valid=gt_valid)


def sample_lidar(sample: StereoSample, n_points: int, seed: int) -> SparseDisparity:
    """Uniform random ground-truth disparities at valid pixels, no repeats."""
    rows, cols = sample.gt_valid.nonzero()
    if n_points > rows.size:
        raise ValueError(f"requested {n_points} points, only {rows.size} valid")
    rng = np.random.default_rng(seed)
    pick = rng.choice(rows.size, size=n_points, replace=False)
    valid = np.zeros_like(sample.gt_valid)
    valid[rows[pick], cols[pick]] = True
    values = np.where(valid, sample.gt_disparity, 0.0)
    return SparseDisparity(values=values, valid=valid)


def split_sparse(sp: SparseDisparity, strategy: str, seed: int):
    """Return (network input set, loss set) per the training strategy."""
    if strategy == "all-in":
        return sp, sp
    if strategy not in ("half1", "half2"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if sp.count < 2:
        raise ValueError("half strategies need at least 2 sparse points")
    rows, cols = sp.valid.nonzero()
    rng = np.random.default_rng(seed)
    pick = rng.choice(rows.size, size=rows.size // 2, replace=False)
    in_valid = np.zeros_like(sp.valid)
    in_valid[rows[pick], cols[pick]] = True
    input_set = SparseDisparity(values=np.where(in_valid, sp.values, 0.0),
                                valid=in_valid)
    if strategy == "half1":
        return input_set, sp
    rest = sp.valid & ~in_valid
    loss_set = SparseDisparity(values=np.where(rest, sp.values, 0.0), valid=rest)
    return input_set, loss_set


def disparity_to_depth(d, focal, baseline):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("disparity must be positive for depth conversion")
    return focal * baseline / d


def depth_to_disparity(depth, focal, baseline):
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive for disparity conversion")
    return focal * baseline / depth


# ---------------------------------------------------------------------------
# file IO


def write_ppm(path, image):
    """8-bit binary PPM (P6) from a [3,H,W] float image in [0,1]."""
    image = np.asarray(image)
    _, h, w = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def _read_token(data, pos):
    while pos < len(data) and data[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", offset=start)
    return data[start:pos], pos


def read_ppm(path):
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic != b"P6":
        raise ParseError(f"bad PPM magic {magic!r}", offset=0)
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise ParseError(f"non-numeric PPM header field {tok!r}",
                             offset=pos - len(tok))
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    need = 3 * h * w
    if len(data) - pos < need:
        raise ParseError(f"truncated pixel data: want {need} bytes, "
                         f"have {len(data) - pos}", offset=pos)
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pfm(path, array):
    """Grayscale PFM: 32-bit floats, little-endian, bottom-up rows."""
    array = np.asarray(array, dtype=np.float32)
    h, w = array.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        fh.write(array[::-1].astype("<f4").tobytes())


def read_pfm(path):
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic != b"Pf":
        raise ParseError(f"bad PFM magic {magic!r} (only grayscale supported)",
                         offset=0)
    dims = []
    for _ in range(2):
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise ParseError(f"non-numeric PFM dimension {tok!r}",
                             offset=pos - len(tok))
        dims.append(int(tok))
    scale_tok, pos = _read_token(data, pos)
    try:
        scale = float(scale_tok)
    except ValueError:
        raise ParseError(f"bad PFM scale {scale_tok!r}", offset=pos - len(scale_tok))
    if scale >= 0:
        raise ParseError("big-endian PFM not supported", offset=pos - len(scale_tok))
    pos += 1
    w, h = dims
    need = 4 * h * w
    if len(data) - pos < need:
        raise ParseError(f"truncated PFM data: want {need} bytes, "
                         f"have {len(data) - pos}", offset=pos)
    vals = np.frombuffer(data, dtype="<f4", count=h * w, offset=pos)
    return vals.reshape(h, w)[::-1].astype(np.float64)


def write_sparse_csv(path, sparse: SparseDisparity):
    rows, cols = sparse.valid.nonzero()
    with open(path, "w") as fh:
        fh.write("i,j,disparity\n")
        for i, j in zip(rows, cols):
            fh.write(f"{i},{j},{float(sparse.values[i, j])!r}\n")


def read_sparse_csv(path, shape) -> SparseDisparity:
    values = np.zeros(shape)
    valid = np.zeros(shape, dtype=bool)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "i,j,disparity":
        raise ParseError("missing 'i,j,disparity' CSV header")
    for row_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ParseError(f"row {row_no}: expected 3 fields, got {len(parts)}")
        try:
            i, j, d = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError(f"row {row_no}: malformed values {line!r}")
        if not (0 <= i < shape[0] and 0 <= j < shape[1]):
            raise ParseError(f"row {row_no}: coordinate ({i},{j}) outside "
                             f"{shape[0]}x{shape[1]}")
        if d <= 0:
            raise ParseError(f"row {row_no}: disparity must be positive, got {d}")
        values[i, j] = d
        valid[i, j] = True
    return SparseDisparity(values=values, valid=valid)
