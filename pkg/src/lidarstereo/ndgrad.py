"""Minimal reverse-mode differentiable array engine.

All values are dense float64 numpy arrays wrapped in :class:`DiffArray`.
Operations executed while a :class:`GradientTape` is active record backward
closures onto the tape; ``tape.backward(scalar)`` replays them in reverse
recording order, which is a valid topological order because the tape is
built record-on-forward.

Broadcasting in binary elementwise ops is deliberately restricted to
scalar-vs-array and equal shapes so every backward rule stays auditable.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Tape misuse: backward without recording, or backward run twice."""


_ACTIVE_TAPES: list["GradientTape"] = []


def _active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class GradientTape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; backward may be called once per recording.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.pop()
        return False

    def _record(self, out, parents, backward):
        self._nodes.append((out, parents, backward))

    def backward(self, root: "DiffArray"):
        """Accumulate gradients of ``root`` (a scalar) into ``.grad`` fields."""
        if self._consumed:
            raise TapeError("backward already run on this tape; re-record first")
        if root.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True
        root.grad = np.ones_like(root.data)
        for out, parents, backward in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for parent, g in zip(parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise ShapeError(
                        f"backward produced grad shape {g.shape} for parent "
                        f"shape {parent.data.shape}")
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad += g


class DiffArray:
    """Dense float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_diff(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_diff(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_diff(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_diff(other), self)

    def __neg__(self):
        return neg(self)


def as_diff(x):
    """Wrap scalars/arrays as constant DiffArrays; pass DiffArrays through."""
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x, dtype=np.float64))


def constant(x):
    return as_diff(x)


def leaf(x, requires_grad=True):
    return DiffArray(np.array(x, dtype=np.float64), requires_grad=requires_grad)


def record(out_data, parents, backward):
    """Create the op output, recording ``backward`` if a tape is active.

    ``backward(grad_out) -> [grad per parent or None]``. Other modules use
    this to define fused operations with local backward rules.
    """
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = DiffArray(out_data, requires_grad=needs)
    if needs:
        tape._record(out, tuple(parents), backward)
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def _binary_shapes(a, b):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"unsupported broadcast: {a.shape} vs {b.shape}")


def _unbroadcast(g, ref):
    if g.shape == ref.shape:
        return g
    return np.sum(g).reshape(ref.shape)


def add(a, b):
    a, b = as_diff(a), as_diff(b)
    _binary_shapes(a, b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.data), _unbroadcast(g, b.data)))


def sub(a, b):
    a, b = as_diff(a), as_diff(b)
    _binary_shapes(a, b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.data), _unbroadcast(-g, b.data)))


def mul(a, b):
    a, b = as_diff(a), as_diff(b)
    _binary_shapes(a, b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.data),
                             _unbroadcast(g * a.data, b.data)))


def div(a, b):
    a, b = as_diff(a), as_diff(b)
    _binary_shapes(a, b)
    return record(a.data / b.data, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.data),
                             _unbroadcast(-g * a.data / b.data ** 2, b.data)))


def neg(a):
    a = as_diff(a)
    return record(-a.data, (a,), lambda g: (-g,))


def absval(a):
    a = as_diff(a)
    return record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a):
    a = as_diff(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def sigmoid(a):
    a = as_diff(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_diff(a)
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def relu(a):
    a = as_diff(a)
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def total(a):
    """Sum of all elements, as a 0-d DiffArray."""
    a = as_diff(a)
    return record(np.sum(a.data), (a,),
                  lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a):
    a = as_diff(a)
    n = a.size
    return record(np.mean(a.data), (a,),
                  lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def sum_axis(a, axis, keepdims=False):
    a = as_diff(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), backward)


def reshape(a, shape):
    a = as_diff(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat_axis0(parts):
    parts = [as_diff(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    return record(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def slice_axis0(a, start, stop):
    a = as_diff(a)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return record(a.data[start:stop], (a,), backward)


def flip_lastdim(a):
    a = as_diff(a)
    return record(a.data[..., ::-1].copy(), (a,),
                  lambda g: (g[..., ::-1].copy(),))


def softmax_axis(a, axis):
    """Numerically stabilized softmax along ``axis``."""
    a = as_diff(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record(out, (a,), backward)


def softmax_lastdim(a):
    return softmax_axis(a, -1)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x, kernels, bias=None, stride=1, padding=0):
    """2D convolution (cross-correlation) on a [C_in,H,W] input.

    Kernels are [C_out,C_in,kh,kw] with odd kh,kw; zero padding. Raises
    ShapeError when the output size is not integral.
    """
    x, kernels = as_diff(x), as_diff(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects 3-d input / 4-d kernels, "
                         f"got {x.shape} / {kernels.shape}")
    c_in, h, w = x.shape
    c_out, c_in2, kh, kw = kernels.shape
    if c_in2 != c_in:
        raise ShapeError(f"kernel C_in {c_in2} != input C_in {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel sizes must be odd")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError("non-integer conv output size")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1

    xpad = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    view = sliding_window_view(xpad, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("cijuv,ocuv->oij", view, kernels.data, optimize=True)
    parents = [x, kernels]
    if bias is not None:
        bias = as_diff(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        gk = np.einsum("cijuv,oij->ocuv", view, g, optimize=True)
        gxpad = np.zeros_like(xpad)
        for u in range(kh):
            for v in range(kw):
                gxpad[:, u:u + stride * h_out:stride, v:v + stride * w_out:stride] += \
                    np.einsum("oc,oij->cij", kernels.data[:, :, u, v], g, optimize=True)
        gx = gxpad[:, padding:padding + h, padding:padding + w]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return record(out, parents, backward)


def avgpool_lastdim(a):
    """Stride-2 average pooling of the last dimension (must be even)."""
    a = as_diff(a)
    w = a.shape[-1]
    if w % 2:
        raise ShapeError(f"last dimension must be even, got {w}")
    pooled = a.data.reshape(a.shape[:-1] + (w // 2, 2)).mean(axis=-1)

    def backward(g):
        return (np.repeat(g, 2, axis=-1) * 0.5,)

    return record(pooled, (a,), backward)


def avgpool2d(a):
    """2x2 stride-2 average pooling over the two trailing spatial dims of [C,H,W]."""
    a = as_diff(a)
    c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"spatial dims must be even, got {a.shape}")
    pooled = a.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return record(pooled, (a,), backward)


def upsample2x(a):
    """Nearest-neighbor 2x upsampling of [C,H,W]."""
    a = as_diff(a)
    out = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)

    def backward(g):
        c, h2, w2 = g.shape
        return (g.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4)),)

    return record(out, (a,), backward)


def pad_lastdim_edge(a, n):
    """Right-pad the last dim with n copies of the edge value."""
    a = as_diff(a)
    if n == 0:
        return a
    pad = [(0, 0)] * (a.ndim - 1) + [(0, n)]
    out = np.pad(a.data, pad, mode="edge")

    def backward(g):
        ga = g[..., :a.shape[-1]].copy()
        ga[..., -1] += g[..., a.shape[-1]:].sum(axis=-1)
        return (ga,)

    return record(out, (a,), backward)


# ---------------------------------------------------------------------------
# sampling and neighborhoods


def gather_linear_lastdim(values, coords):
    """Linear interpolation of ``values[..., W]`` at fractional ``coords``.

    Two coordinate layouts are accepted: one sample per row (coords shape
    equals ``values.shape[:-1]``) or many samples per row (coords shape is
    ``values.shape[:-1] + (n,)``). Coordinates are clamped to [0, W-1];
    gradients flow to both the sampled values and the coordinates (zero
    coordinate-gradient where clamped).
    """
    values, coords = as_diff(values), as_diff(coords)
    lead = values.shape[:-1]
    per_element = coords.shape == lead
    if not per_element and coords.shape[:-1] != lead:
        raise ShapeError(f"coords shape {coords.shape} incompatible with "
                         f"value shape {values.shape}")
    w = values.shape[-1]
    if w < 2:
        raise ShapeError("need at least two samples along the last dim")
    c = coords.data[..., None] if per_element else coords.data
    x = np.clip(c, 0.0, w - 1.0)
    # non-finite coordinates propagate NaN through frac instead of
    # producing out-of-range indices
    x0 = np.floor(np.where(np.isfinite(x), x, 0.0)).astype(np.int64)
    x0 = np.minimum(x0, w - 2)
    frac = x - x0
    v0 = np.take_along_axis(values.data, x0, axis=-1)
    v1 = np.take_along_axis(values.data, x0 + 1, axis=-1)
    out = v0 * (1.0 - frac) + v1 * frac
    inside = (c > 0.0) & (c < w - 1.0)

    def backward(g):
        gfull = g[..., None] if per_element else g
        n = x0.shape[-1]
        gv = np.zeros_like(values.data)
        flat_v = gv.reshape(-1, w)
        rows = np.arange(flat_v.shape[0])[:, None]
        i0 = x0.reshape(-1, n)
        np.add.at(flat_v, (rows, i0), (gfull * (1.0 - frac)).reshape(-1, n))
        np.add.at(flat_v, (rows, i0 + 1), (gfull * frac).reshape(-1, n))
        gc = gfull * (v1 - v0) * inside
        return (gv, gc[..., 0] if per_element else gc)

    return record(out[..., 0] if per_element else out, (values, coords), backward)


def bilinear_sample_1d(row, x):
    """Sample a 1-d row at fractional position x (both differentiable)."""
    row, x = as_diff(row), as_diff(x)
    if row.ndim != 1:
        raise ShapeError(f"row must be 1-d, got {row.shape}")
    return gather_linear_lastdim(row, reshape(x, ()))


# 3x3 neighborhood offsets, row-major over (di,dj); center is index 4.
NEIGHBOR_OFFSETS = tuple((di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1))
CENTER_INDEX = 4


def neighbors3x3(a):
    """Stack the 9 edge-replicated 3x3 neighbors of [H,W] as [9,H,W]."""
    a = as_diff(a)
    if a.ndim != 2:
        raise ShapeError(f"expected [H,W], got {a.shape}")
    h, w = a.shape
    pad = np.pad(a.data, 1, mode="edge")
    out = np.stack([pad[1 + di:1 + di + h, 1 + dj:1 + dj + w]
                    for di, dj in NEIGHBOR_OFFSETS])

    def backward(g):
        gpad = np.zeros((h + 2, w + 2))
        for idx, (di, dj) in enumerate(NEIGHBOR_OFFSETS):
            gpad[1 + di:1 + di + h, 1 + dj:1 + dj + w] += g[idx]
        ga = gpad[1:-1, 1:-1].copy()
        ga[0, :] += gpad[0, 1:-1]
        ga[-1, :] += gpad[-1, 1:-1]
        ga[:, 0] += gpad[1:-1, 0]
        ga[:, -1] += gpad[1:-1, -1]
        ga[0, 0] += gpad[0, 0]
        ga[0, -1] += gpad[0, -1]
        ga[-1, 0] += gpad[-1, 0]
        ga[-1, -1] += gpad[-1, -1]
        return (ga,)

    return record(out, (a,), backward)


def mean3x3(a):
    """3x3 box mean with reflect padding, per channel; accepts [H,W] or [C,H,W]."""
    a = as_diff(a)
    squeeze = a.ndim == 2
    data = a.data[None] if squeeze else a.data
    if data.ndim != 3:
        raise ShapeError(f"expected [H,W] or [C,H,W], got {a.shape}")
    c, h, w = data.shape
    pad = np.pad(data, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    out = np.zeros_like(data)
    for di, dj in NEIGHBOR_OFFSETS:
        out += pad[:, 1 + di:1 + di + h, 1 + dj:1 + dj + w]
    out /= 9.0
    if squeeze:
        out = out[0]

    def backward(g):
        gg = (g[None] if squeeze else g) / 9.0
        gpad = np.zeros((c, h + 2, w + 2))
        for di, dj in NEIGHBOR_OFFSETS:
            gpad[:, 1 + di:1 + di + h, 1 + dj:1 + dj + w] += gg
        ga = gpad[:, 1:-1, 1:-1].copy()
        # reflect padding folds the halo back one pixel inside the border
        ga[:, 1, :] += gpad[:, 0, 1:-1]
        ga[:, -2, :] += gpad[:, -1, 1:-1]
        ga[:, :, 1] += gpad[:, 1:-1, 0]
        ga[:, :, -2] += gpad[:, 1:-1, -1]
        ga[:, 1, 1] += gpad[:, 0, 0]
        ga[:, 1, -2] += gpad[:, 0, -1]
        ga[:, -2, 1] += gpad[:, -1, 0]
        ga[:, -2, -2] += gpad[:, -1, -1]
        return (ga[0] if squeeze else ga,)

    return record(out, (a,), backward)


# ---------------------------------------------------------------------------
# finite-difference checking


def finite_difference(fn, arrays, h=1e-6):
    """Central finite-difference gradients of ``fn(list of ndarrays) -> float``."""
    grads = []
    for idx, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for k in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[idx].reshape(-1)[k] += h
            hi = fn(bumped)
            bumped[idx].reshape(-1)[k] -= 2 * h
            lo = fn(bumped)
            flat[k] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def gradient_check(build, arrays, h=1e-6):
    """Compare tape gradients of ``build`` against central finite differences.

    ``build(list of DiffArray leaves) -> scalar DiffArray``. Returns the max
    relative error over all leaves (infinity-norm, magnitude-normalized).
    """
    leaves = [leaf(a) for a in arrays]
    with GradientTape() as tape:
        out = build(leaves)
    tape.backward(out)
    fd = finite_difference(lambda arrs: build([as_diff(a) for a in arrs]).item(),
                           [np.asarray(a, dtype=np.float64) for a in arrays], h=h)
    worst = 0.0
    for lf, g_fd in zip(leaves, fd):
        g_tape = lf.grad if lf.grad is not None else np.zeros_like(g_fd)
        scale = max(np.max(np.abs(g_fd)) if g_fd.size else 0.0, 1e-8)
        worst = max(worst, float(np.max(np.abs(g_tape - g_fd))) / scale)
    return worst
