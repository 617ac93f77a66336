"""
Differentiable operators.

Every op takes Tensors (plain numbers and arrays are lifted to constants with
the dtype of the tensor operand) and returns a Tensor whose Node carries
one vjp per differentiable parent.

Broadcasting follows numpy but only over leading axes and explicit size-1
axes; vjps sum the broadcast axes back out.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from apps.tensorcore.exceptions import DimensionError, UsageError
from apps.tensorcore.tensor import Tensor, as_tensor, make_result

LEAKY_SLOPE = 0.2


# ── Helpers ───────────────────────────────────────────────────────────────────

def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError("incompatible broadcast", a.shape, b.shape) from None


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


# ── Elementwise binary ────────────────────────────────────────────────────────

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make_result(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ], 'add')


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make_result(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ], 'sub')


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make_result(a.data * b.data, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ], 'mul')


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return make_result(out, [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.data, b.shape)),
    ], 'div')


# ── Elementwise unary ─────────────────────────────────────────────────────────

def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_result(-x.data, [(x, lambda g: -g)], 'neg')


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return make_result(np.where(active, x.data, 0).astype(x.dtype), [(x, lambda g: g * active)], 'relu')


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, [(x, lambda g: g * scale)], 'leaky_relu')


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return make_result(out, [(x, lambda g: g * out * (1 - out))], 'sigmoid')


def log1p(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.log1p(x.data), [(x, lambda g: g / (1 + x.data))], 'log1p')


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, [(x, lambda g: g * out)], 'exp')


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.log(x.data), [(x, lambda g: g / x.data)], 'log')


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_result(out, [(x, lambda g: g / (2 * out))], 'sqrt')


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_result(x.data * x.data, [(x, lambda g: 2 * g * x.data)], 'square')


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return make_result(np.abs(x.data), [(x, lambda g: g * np.sign(x.data))], 'abs')


_ELEMENTWISE = {
    'add': add,
    'mul': mul,
    'relu': relu,
    'leaky_relu': leaky_relu,
    'sigmoid': sigmoid,
    'log1p': log1p,
}


def elementwise(kind: str, *inputs) -> Tensor:
    """Dispatch by name: add, mul, relu, leaky_relu (slope 0.2), sigmoid, log1p."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise UsageError(f"unknown elementwise kind '{kind}'") from None
    return fn(*inputs)


# ── Reductions / shape ops ────────────────────────────────────────────────────

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, x.shape)

    return make_result(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), [(x, vjp)], 'sum')


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape to {tuple(shape)}", x.shape) from None
    return make_result(out, [(x, lambda g: g.reshape(x.shape))], 'reshape')


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), [(x, lambda g: g.transpose(inverse))], 'transpose')


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat extents disagree", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def piece(i):
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return make_result(out, [(t, piece(i)) for i, t in enumerate(tensors)], 'concat')


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather entries of `x` along `axis`; repeated indices accumulate in the vjp."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise DimensionError(f"index out of range for axis {axis}", x.shape)

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return full

    return make_result(np.take(x.data, idx, axis=axis), [(x, vjp)], 'take')


# ── Linear algebra ────────────────────────────────────────────────────────────

def matmul(a, b) -> Tensor:
    """
    Matrix product of 2-D operands, or batched over equal leading extents.
    d a = g · bᵀ, d b = aᵀ · g.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul shape mismatch", a.shape, b.shape)
    return make_result(np.matmul(a.data, b.data), [
        (a, lambda g: np.matmul(g, np.swapaxes(b.data, -1, -2))),
        (b, lambda g: np.matmul(np.swapaxes(a.data, -1, -2), g)),
    ], 'matmul')


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return make_result(out, [
        (x, lambda g: out * (g - (g * out).sum(axis=axis, keepdims=True))),
    ], 'softmax')


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return make_result(out, [
        (x, lambda g: g - probs * g.sum(axis=axis, keepdims=True)),
    ], 'log_softmax')


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis, then scale by gain and shift by bias."""
    x = as_tensor(x)
    gain, bias = as_tensor(gain, like=x), as_tensor(bias, like=x)
    channels = x.shape[-1]
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise DimensionError("layer_norm gain/bias must match channels", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    lead = tuple(range(x.ndim - 1))

    def vjp_x(g):
        dxhat = g * gain.data
        return inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                          - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))

    return make_result(xhat * gain.data + bias.data, [
        (x, vjp_x),
        (gain, lambda g: (g * xhat).sum(axis=lead)),
        (bias, lambda g: g.sum(axis=lead)),
    ], 'layer_norm')


# ── Convolution ───────────────────────────────────────────────────────────────

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(C, Hp, Wp) → (C·kh·kw, out_h·out_w) patch matrix."""
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :out_h, :out_w]
    channels = xp.shape[0]
    return windows.transpose(0, 3, 4, 1, 2).reshape(channels * kh * kw, out_h * out_w)


def _col2im(cols: np.ndarray, channels: int, height: int, width: int,
            kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Scatter-add adjoint of _im2col."""
    image = np.zeros((channels, height, width), dtype=cols.dtype)
    patches = cols.reshape(channels, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            image[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += patches[:, i, j]
    return image


def _check_geometry(stride, pad):
    if stride < 1 or pad < 0:
        raise DimensionError(f"invalid conv geometry stride={stride} pad={pad}")


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """
    Cross-correlation of x (C_in×H×W) with w (C_out×C_in×kh×kw), zero padding.
    """
    x, w = _pair(x, w)
    _check_geometry(stride, pad)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise DimensionError("conv2d expects C_in×H×W input and C_out×C_in×kh×kw weight", x.shape, w.shape)
    channels, height, width = x.shape
    c_out, _, kh, kw = w.shape
    hp, wp = height + 2 * pad, width + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError("kernel larger than padded input", x.shape, w.shape)
    out_h, out_w = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    w2 = w.data.reshape(c_out, -1)
    out = (w2 @ cols).reshape(c_out, out_h, out_w)

    def vjp_x(g):
        dcols = w2.T @ g.reshape(c_out, -1)
        dxp = _col2im(dcols, channels, hp, wp, kh, kw, stride, out_h, out_w)
        return dxp[:, pad:pad + height, pad:pad + width]

    parents = [
        (x, vjp_x),
        (w, lambda g: (g.reshape(c_out, -1) @ cols.T).reshape(w.shape)),
    ]
    if b is not None:
        b = as_tensor(b, like=x)
        if b.shape != (c_out,):
            raise DimensionError("conv2d bias must have C_out entries", b.shape, (c_out,))
        out = out + b.data[:, None, None]
        parents.append((b, lambda g: g.sum(axis=(1, 2))))
    return make_result(out, parents, 'conv2d')


def conv_transpose2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """
    Exact adjoint of conv2d: x (C_in×H×W), w (C_in×C_out×kh×kw).
    Output extent (H − 1)·stride − 2·pad + kh.
    """
    x, w = _pair(x, w)
    _check_geometry(stride, pad)
    if x.ndim != 3 or w.ndim != 4 or w.shape[0] != x.shape[0]:
        raise DimensionError("conv_transpose2d expects C_in×H×W input and C_in×C_out×kh×kw weight",
                             x.shape, w.shape)
    c_in, height, width = x.shape
    _, c_out, kh, kw = w.shape
    full_h, full_w = (height - 1) * stride + kh, (width - 1) * stride + kw
    out_h, out_w = full_h - 2 * pad, full_w - 2 * pad
    if out_h <= 0 or out_w <= 0:
        raise DimensionError("transpose conv output would be empty", x.shape, w.shape)

    w2 = w.data.reshape(c_in, -1)
    x2 = x.data.reshape(c_in, -1)
    full = _col2im(w2.T @ x2, c_out, full_h, full_w, kh, kw, stride, height, width)
    out = full[:, pad:pad + out_h, pad:pad + out_w]

    def grad_cols(g):
        gfull = np.pad(g, ((0, 0), (pad, pad), (pad, pad)))
        return _im2col(gfull, kh, kw, stride, height, width)

    parents = [
        (x, lambda g: (w2 @ grad_cols(g)).reshape(x.shape)),
        (w, lambda g: (x2 @ grad_cols(g).T).reshape(w.shape)),
    ]
    if b is not None:
        b = as_tensor(b, like=x)
        if b.shape != (c_out,):
            raise DimensionError("conv_transpose2d bias must have C_out entries", b.shape, (c_out,))
        out = out + b.data[:, None, None]
        parents.append((b, lambda g: g.sum(axis=(1, 2))))
    return make_result(np.ascontiguousarray(out), parents, 'conv_transpose2d')
