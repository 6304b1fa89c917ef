"""Differentiable operations over :class:`~mscloudcam.tensor.Tensor`.

Each function computes the forward value eagerly and, when any input
requires a gradient, registers a vector-Jacobian callback on the tape.
All spatial ops use zero padding and the canonical (B, C, H, W) layout.
"""
from __future__ import annotations

import functools
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Tensor, TapeNode, is_grad_enabled

Scalar = Union[int, float]


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(op: str, data: np.ndarray, parents: Tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", data, (a, b), vjp)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result("div", data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def pow(a: Tensor, exponent: Scalar) -> Tensor:  # noqa: A001 - mirrors numpy
    e = float(exponent)
    data = a.data ** e

    def vjp(g):
        return (g * e * a.data ** (e - 1.0),)

    return _result("pow", data, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _result("exp", data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _result("tanh", data, (a,), lambda g: (g * (1.0 - data * data),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result("matmul", data, (a, b), vjp)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result("transpose", a.data.transpose(axes), (a,),
                   lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing; positions are unique so the backward
    pass writes the gradient into a zero tensor directly."""
    data = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g.reshape(full[idx].shape)
        return (full,)

    return _result("getitem", np.ascontiguousarray(data), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = [t.data for t in tensors]
    data = np.concatenate(parts, axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", data, tuple(tensors), vjp)


def pad(a: Tensor, pad_width: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; ``pad_width`` follows numpy's per-axis convention."""
    pw = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    data = np.pad(a.data, pw)
    crop = tuple(slice(lo, lo + s) for (lo, _), s in zip(pw, a.shape))

    def vjp(g):
        return (g[crop],)

    return _result("pad", data, (a,), vjp)


def roll(a: Tensor, shifts: Tuple[int, ...], axes: Tuple[int, ...]) -> Tensor:
    data = np.roll(a.data, shifts, axis=axes)
    back = tuple(-s for s in shifts)

    def vjp(g):
        return (np.roll(g, back, axis=axes),)

    return _result("roll", data, (a,), vjp)


def index_select(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; backward scatter-adds (used by the
    relative position bias lookup)."""
    idx = np.asarray(index)
    data = table.data[idx]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result("index_select", data, (table,), vjp)


def cast(a: Tensor, dtype) -> Tensor:
    src = a.data.dtype
    return _result("cast", a.data.astype(dtype), (a,),
                   lambda g: (g.astype(src),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, a.ndim)

    def vjp(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", data, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if axes is None:
        n = a.size
    else:
        n = int(np.prod([a.shape[ax] for ax in axes]))
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy() / n,)

    return _result("mean", data, (a,), vjp)


def max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Single-axis max; ties route the gradient to the first maximum."""
    idx = np.argmax(a.data, axis=axis)
    idx_e = np.expand_dims(idx, axis)
    data = np.take_along_axis(a.data, idx_e, axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx_e, g, axis)
        return (full,)

    return _result("max", data, (a,), vjp)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,),
                   lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _result("sigmoid", data, (a,), lambda g: (g * data * (1.0 - data),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    data = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _result("gelu", data, (a,), vjp)


def elementwise(a: Tensor, kind: str) -> Tensor:
    try:
        return {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}[kind](a)
    except KeyError:
        raise ShapeError(f"elementwise: unknown kind {kind!r}") from None


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; rows sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _result("softmax", data, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def vjp(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", data, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    data = xhat * gain.data + bias.data

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        gq = g * gain.data
        dx = inv * (gq - gq.mean(axis=-1, keepdims=True)
                    - xhat * (gq * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _result("layer_norm", data, (a, gain, bias), vjp)


# ---------------------------------------------------------------------------
# convolution machinery (im2col / col2im)
# ---------------------------------------------------------------------------

def conv_out_size(h: int, k: int, s: int, p: int, d: int) -> int:
    return (h + 2 * p - d * (k - 1) - 1) // s + 1


def _im2col(x: np.ndarray, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        hi = i * dh
        for j in range(kw):
            wj = j * dw
            cols[:, :, i, j] = xp[:, :, hi:hi + (ho - 1) * sh + 1:sh,
                                  wj:wj + (wo - 1) * sw + 1:sw]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, x_shape, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo) -> np.ndarray:
    b, c, h, w = x_shape
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        hi = i * dh
        for j in range(kw):
            wj = j * dw
            xp[:, :, hi:hi + (ho - 1) * sh + 1:sh,
               wj:wj + (wo - 1) * sw + 1:sw] += cols[:, :, i, j]
    return xp[:, :, ph:ph + h, pw:pw + w]


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding=0, dilation=1) -> Tensor:
    """2-D convolution; weight layout (C_out, C_in, kh, kw), zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/weight, got {x.shape}/{weight.shape}")
    b, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    ho = conv_out_size(h, kh, sh, ph, dh)
    wo = conv_out_size(w, kw, sw, pw, dw)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo} "
                         f"for input {h}x{w}, kernel {kh}x{kw}")
    cols = _im2col(x.data, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)
    w2 = weight.data.reshape(co, ci * kh * kw)
    out = np.matmul(w2, cols).reshape(b, co, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(b, co, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            gx = _col2im(gcols, x.shape, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)
        if weight.requires_grad:
            gw = np.einsum("bol,bkl->ok", g2, cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result("conv2d", out, parents, vjp)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride=1, padding=0) -> Tensor:
    """Transposed convolution; weight layout (C_in, C_out, kh, kw).

    For zero bias this is the exact adjoint of ``conv2d`` with the same
    weight array: <conv2d(a, w), y> == <a, conv_transpose2d(y, w)>.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected 4-D input/weight, got {x.shape}/{weight.shape}")
    b, c, h, w = x.shape
    ci, co, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, kernel expects {ci}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h - 1) * sh - 2 * ph + kh
    wo = (w - 1) * sw - 2 * pw + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output size {ho}x{wo}")
    w2 = weight.data.reshape(ci, co * kh * kw)
    cols = np.matmul(np.ascontiguousarray(w2.T), x.data.reshape(b, ci, h * w))
    out = _col2im(cols, (b, co, ho, wo), kh, kw, sh, sw, ph, pw, 1, 1, h, w)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = gw = gb = None
        gcols = None
        if x.requires_grad or weight.requires_grad:
            gcols = _im2col(g, kh, kw, sh, sw, ph, pw, 1, 1, h, w)
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(b, ci, h, w)
        if weight.requires_grad:
            gw = np.einsum("bil,bkl->ik", x.data.reshape(b, ci, h * w),
                           gcols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result("conv_transpose2d", out, parents, vjp)


# ---------------------------------------------------------------------------
# pooling / resizing
# ---------------------------------------------------------------------------

def adaptive_avg_pool2d(x: Tensor, out_hw) -> Tensor:
    """Average pooling to an (s_h, s_w) grid; bins partition the input as
    evenly as possible with floor boundaries floor(i*H/s)..floor((i+1)*H/s)."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d: expected 4-D input, got {x.shape}")
    oh, ow = _pair(out_hw)
    b, c, h, w = x.shape
    if oh < 1 or ow < 1:
        raise ShapeError("adaptive_avg_pool2d: output grid must be >= 1")
    if oh > h or ow > w:
        raise ShapeError(f"adaptive_avg_pool2d: grid {oh}x{ow} exceeds input {h}x{w}")
    hb = [(i * h // oh, (i + 1) * h // oh) for i in range(oh)]
    wb = [(j * w // ow, (j + 1) * w // ow) for j in range(ow)]
    out = np.empty((b, c, oh, ow), dtype=x.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                area = (h1 - h0) * (w1 - w0)
                gx[:, :, h0:h1, w0:w1] += g[:, :, i:i + 1, j:j + 1] / area
        return (gx,)

    return _result("adaptive_avg_pool2d", out, (x,), vjp)


@functools.lru_cache(maxsize=256)
def _resize_matrix(src: int, dst: int, dtype_str: str) -> np.ndarray:
    """Row-interpolation matrix for align_corners=False bilinear resizing.

    Source coordinate for output i is (i + 0.5) * src/dst - 0.5, clamped
    to [0, src-1]; each output row mixes at most two source rows.
    """
    m = np.zeros((dst, src), dtype=np.dtype(dtype_str))
    scale = src / dst
    for i in range(dst):
        s = float(np.clip((i + 0.5) * scale - 0.5, 0.0, src - 1.0))
        i0 = int(np.floor(s))
        t = s - i0
        i1 = i0 + 1 if i0 + 1 < src else src - 1
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def resize_bilinear(x: Tensor, out_hw) -> Tensor:
    """Bilinear resize (align_corners=False); exact on constant fields."""
    if x.ndim != 4:
        raise ShapeError(f"resize_bilinear: expected 4-D input, got {x.shape}")
    oh, ow = _pair(out_hw)
    if oh < 1 or ow < 1:
        raise ShapeError("resize_bilinear: target size must be >= 1")
    b, c, h, w = x.shape
    dt = str(x.dtype)
    rh = _resize_matrix(h, oh, dt)
    rw = _resize_matrix(w, ow, dt)
    flat = x.data.reshape(b * c, h, w)
    out = np.matmul(np.matmul(rh, flat), rw.T).reshape(b, c, oh, ow)

    def vjp(g):
        gf = g.reshape(b * c, oh, ow)
        gx = np.matmul(np.matmul(rh.T, gf), rw).reshape(b, c, h, w)
        return (gx,)

    return _result("resize_bilinear", out, (x,), vjp)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tuple[Tensor, int]:
    """Mean pixel-wise multiclass cross-entropy over non-ignored pixels.

    ``logits`` is (B, K, H, W); ``labels`` is an integer (B, H, W) map with
    values in {0..K-1} or ``ignore_index``. Returns (loss, n_valid); with
    zero valid pixels the loss is exactly 0 and carries no gradient.
    """
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy: expected 4-D logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    k = logits.shape[1]
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        values = np.unique(labels[bad])
        raise DataError(f"cross_entropy: labels {values.tolist()} outside 0..{k - 1} "
                        f"(ignore={ignore_index}), {int(bad.sum())} pixels")
    n = int(valid.sum())
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse  # (B, K, H, W)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    if n == 0:
        loss_val = np.zeros((), dtype=x.dtype)
    else:
        loss_val = -(picked * valid).sum(dtype=x.dtype) / n

    def vjp(g):
        if n == 0:
            return (np.zeros_like(x),)
        grad = np.exp(logp)
        onehot_idx = safe[:, None]
        np.put_along_axis(grad, onehot_idx,
                          np.take_along_axis(grad, onehot_idx, axis=1) - 1.0, axis=1)
        grad *= valid[:, None]
        return (grad * (g / n),)

    return _result("cross_entropy", loss_val, (logits,), vjp), n
