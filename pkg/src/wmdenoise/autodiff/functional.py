"""Differentiable ops over :class:`~wmdenoise.autodiff.tensor.Tensor`.

Images are NCHW.  Binary elementwise ops accept identical shapes, python
scalars, or operands that differ only by a leading batch dimension of 1.
Anything else is a shape error: reshape explicitly.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# elementwise


def _check_binary(a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if len(sa) == len(sb) and sa[1:] == sb[1:] and (sa[0] == 1 or sb[0] == 1):
        return
    raise ShapeError(f"shapes {sa} and {sb} differ beyond a leading batch dim of 1")


def _unbatch(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.sum(axis=0, keepdims=True)


def _lift(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    return a, b


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_binary(a, b)

    def bw(g):
        return _unbatch(g, a.shape), _unbatch(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_binary(a, b)

    def bw(g):
        return _unbatch(g, a.shape), _unbatch(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_binary(a, b)

    def bw(g):
        ga = _unbatch(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbatch(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw)


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1.0 - y * y),))


def round_ste(x: Tensor) -> Tensor:
    """Round half away from zero forward, identity gradient backward."""
    y = np.sign(x.data) * np.floor(np.abs(x.data) + 0.5)
    return make_result(y.astype(x.dtype), (x,), lambda g: (g,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                       lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    shape, n = x.shape, x.size
    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                       lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(x.data[index], (x,), bw)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise ShapeError(f"concat on axis {axis}: {t.shape} incompatible with {ref.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)] if t.requires_grad else None)
        return out

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        if gb is not None and gb.shape != b.shape:
            gb = gb.reshape((-1,) + b.shape).sum(axis=0)
        return ga, gb

    return make_result(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight in-features {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(y, parents, bw)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((c, k, k, b, ho, wo), dtype=xp.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + hs:stride, j:j + ws:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, b * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, hp, wp = shape
    cols = cols.reshape(c, k, k, b, ho, wo)
    out = np.zeros((c, b, hp, wp), dtype=cols.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a B×C×H×W input with an O×C×k×k kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channels (axis 1) {c} != weight in-channels (axis 1) {cw}")
    if kh != kw or kh < 1:
        raise ShapeError(f"conv2d: kernel must be square, got axes 2,3 = {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ShapeError("conv2d: padding must be >= 0 and stride >= 1")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {k}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    y = (wmat @ cols).reshape(o, b, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        y = y + bias.data.reshape(1, o, 1, 1)
    y = np.ascontiguousarray(y)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(wmat.T @ gmat, (b, c, hp, wp), k, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(y, parents, bw)


def channel_scale(x: Tensor, gates: Tensor) -> Tensor:
    """Multiply each B×C feature map by a per-(batch, channel) gate."""
    if x.ndim != 4 or gates.shape != x.shape[:2]:
        raise ShapeError(f"channel_scale: gates {gates.shape} must be {x.shape[:2]}")
    gd = gates.data[:, :, None, None]

    def bw(g):
        gx = g * gd if x.requires_grad else None
        gg = (g * x.data).sum(axis=(2, 3)) if gates.requires_grad else None
        return gx, gg

    return make_result(x.data * gd, (x, gates), bw)


# ---------------------------------------------------------------------------
# pooling and resampling


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects B×C×H×W, got {x.shape}")
    shape = x.shape
    n = shape[2] * shape[3]
    return make_result(x.data.mean(axis=(2, 3)), (x,),
                       lambda g: (np.broadcast_to(g[:, :, None, None] / n, shape).astype(x.dtype),))


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    b, c, h, w = x.shape
    if k < 1 or h // k == 0 or w // k == 0:
        raise ShapeError(f"avg_pool2d: factor {k} leaves an empty output for {h}x{w}")
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    y = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g / (k * k), k, axis=2), k, axis=3),)

    return make_result(y, (x,), bw)


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError(f"nearest_upsample: factor must be a positive integer, got {factor}")
    b, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(y, (x,), bw)


def separable_map(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply ``rows @ X @ cols.T`` to every H×W plane of a B×C×H×W tensor.

    Linear resamplers, blurs and blockwise transforms all reduce to this.
    """
    rows = np.asarray(rows, dtype=x.dtype)
    cols = np.asarray(cols, dtype=x.dtype)
    if rows.shape[1] != x.shape[2] or cols.shape[1] != x.shape[3]:
        raise ShapeError(f"separable_map: operators {rows.shape}, {cols.shape} do not fit {x.shape}")
    y = rows @ x.data @ cols.T
    return make_result(y, (x,), lambda g: (rows.T @ g @ cols,))


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix (n_out × n_in) with half-pixel centre alignment."""
    if n_out < 1:
        raise ShapeError("bilinear resize to an empty dimension")
    m = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def bilinear_resize(x: Tensor, scale: Optional[float] = None,
                    size: Optional[tuple] = None) -> Tensor:
    h, w = x.shape[2:]
    if size is None:
        if scale is None or scale <= 0:
            raise ShapeError(f"bilinear_resize: scale must be > 0, got {scale}")
        size = (int(np.floor(h * scale + 0.5)), int(np.floor(w * scale + 0.5)))
    if size[0] < 1 or size[1] < 1:
        raise ShapeError(f"bilinear_resize: output size {size} is empty")
    return separable_map(x, bilinear_matrix(h, size[0]), bilinear_matrix(w, size[1]))


# ---------------------------------------------------------------------------
# losses


def mse(a: Tensor, b) -> Tensor:
    a, b = _lift(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ShapeError("mse of empty tensors")
    return mean(square(sub(a, b)))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits, stable for any magnitude."""
    targets = np.broadcast_to(np.asarray(targets.data if isinstance(targets, Tensor) else targets,
                                         dtype=logits.dtype), logits.shape)
    if logits.size == 0:
        raise ShapeError("bce_with_logits of an empty tensor")
    z = logits.data
    loss = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g):
        e = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return ((g / n) * (sig - targets)).astype(logits.dtype),

    return make_result(np.asarray(loss.mean(), dtype=logits.dtype), (logits,), bw)
