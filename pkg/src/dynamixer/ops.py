"""Differentiable tensor ops.

Each op computes its forward value with numpy (or the selected row kernel)
and tapes a closure mapping the output gradient to input gradients.
Elementwise ops broadcast like numpy; gradients are summed back to each
operand's shape.
"""
import numpy as np

from dynamixer import kernels
from dynamixer.errors import DimensionError, NumericError
from dynamixer.tensor import Tensor, record

LAYER_NORM_EPS = 1e-6


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), backward)


def scale(a, c):
    c = float(c)

    def backward(g):
        return (g * c,)

    return record(a.data * c, (a,), backward)


def matmul(a, b):
    """Batched matrix product over the last two axes; batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    k = a.shape[-1]
    if b.ndim == 2:
        # One large GEMM instead of a numpy batch loop.
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if b.ndim == 2:
            if a.requires_grad:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return record(out, (a, b), backward)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return record(out, (a,), backward)


def permute(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return record(a.data.transpose(axes), (a,), backward)


def expand(a, shape):
    """Broadcast ``a`` to ``shape`` (numpy rules); gradient sums back."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"expand: cannot broadcast {a.shape} to {shape}") from None

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return record(out, (a,), backward)


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    ref = parts[0]
    ax = axis % ref.ndim
    for p in parts[1:]:
        if p.ndim != ref.ndim or p.shape[:ax] + p.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise DimensionError(f"concat: {ref.shape} and {p.shape} differ off axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


def narrow(a, axis, start, length):
    """Slice ``length`` entries of ``axis`` starting at ``start``."""
    ax = axis % a.ndim
    if start < 0 or length < 1 or start + length > a.shape[ax]:
        raise DimensionError(f"narrow: [{start}, {start + length}) out of range for axis of {a.shape[ax]}")
    index = (slice(None),) * ax + (slice(start, start + length),)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return record(a.data[index], (a,), backward)


def split(a, sizes, axis=-1):
    """Inverse of :func:`concat`; ``sizes`` is a count of equal parts or a list of widths."""
    n = a.shape[axis]
    if isinstance(sizes, int):
        if n % sizes:
            raise DimensionError(f"split: axis of {n} not divisible into {sizes} parts")
        sizes = [n // sizes] * sizes
    if int(np.sum(sizes)) != n:
        raise DimensionError(f"split: widths {sizes} do not sum to {n}")
    out, start = [], 0
    for width in sizes:
        out.append(narrow(a, axis, start, width))
        start += width
    return out


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axes, keepdims), 1.0 / count)


def softmax(a, axis=-1):
    """Softmax along ``axis`` with max-subtraction."""
    ax = axis % a.ndim
    if ax != a.ndim - 1:
        order = tuple(i for i in range(a.ndim) if i != ax) + (ax,)
        inverse = tuple(np.argsort(order))
        return permute(softmax(permute(a, order), -1), inverse)
    y = kernels.softmax_lastdim(a.data)
    if np.isnan(y).any():
        raise NumericError("softmax: NaN in input or overflow to non-finite values")

    def backward(g):
        return (kernels.softmax_lastdim_backward(y, g),)

    return record(y, (a,), backward)


def softmax_rows(a):
    return softmax(a, -1)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {x.shape[-1]}")
    out, xhat, rstd = kernels.layer_norm(x.data, gain.data, bias.data, eps)

    def backward(g):
        return kernels.layer_norm_backward(g, xhat, rstd, gain.data)

    return record(out, (x, gain, bias), backward)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    src = x.data

    def backward(g):
        return (kernels.gelu_backward(src, g),)

    return record(kernels.gelu(src), (x,), backward)


def cross_entropy(logits, targets, label_smoothing=0.0):
    """Mean softmax cross-entropy of ``logits`` (B, C) against integer targets."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be (batch, classes), got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if targets.shape[0] != batch:
        raise DimensionError(f"cross_entropy: {batch} logits rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise ValueError(f"cross_entropy: targets must lie in [0, {classes})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    q = np.full_like(z, label_smoothing / classes)
    q[np.arange(batch), targets] += 1.0 - label_smoothing
    loss = -(q * logp).sum() / batch

    def backward(g):
        return (g * (np.exp(logp) - q) / batch,)

    return record(np.asarray(loss, dtype=z.dtype), (logits,), backward)
