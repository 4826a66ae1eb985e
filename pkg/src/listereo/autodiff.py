"""Minimal reverse-mode automatic differentiation over rank-4 numpy arrays.

Every value flowing through the network is a :class:`Tensor` of shape
``(batch, channels, height, width)``.  Operations record a closure that maps
the output gradient to input gradients; :func:`backward` replays those
closures in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ContractError", "backward", "zero_grad", "no_grad", "precision",
    "get_dtype", "set_dtype", "tensor", "constant", "parameter",
    "conv2d", "sparse_conv2d", "batch_norm", "RunningStats", "leaky_relu",
    "bilinear_resize", "adaptive_avg_pool2d", "softmax_channel",
    "sample_horizontal", "correlation", "concat_channels", "add", "sub", "mul",
    "div", "abs", "exp", "neg", "scale", "clip", "maximum", "sum", "mean",
    "masked_mean", "avg_pool2d", "max_pool2d", "crop",
    "LEAKY_SLOPE", "BN_EPS", "BN_MOMENTUM", "SPARSE_EPS",
]

LEAKY_SLOPE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
SPARSE_EPS = 1e-8


class ContractError(ValueError):
    """Raised when an operation's shape or usage contract is violated."""


_state = threading.local()


def get_dtype():
    return getattr(_state, "dtype", np.float32)


def set_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. ``np.float64``)."""
    old = get_dtype()
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    old = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    """Immutable rank-4 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ContractError(f"Tensor must be rank 4, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ContractError(f"Tensor shape components must be >= 1, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_dtype())
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_dtype()), requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_dtype()))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=get_dtype())
    while arr.ndim < 4:
        arr = arr[None]
    return Tensor(arr)


def _make(data, parents, backward_fn) -> Tensor:
    """Build an op output; record the closure only if some parent needs grad."""
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


# --------------------------------------------------------------------------
# graph traversal

def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires-grad leaf.

    Returns the list of leaves that received gradients.  A loss can be
    back-propagated once; its graph is released afterwards.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a scalar-shaped (1,1,1,1) loss, got {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already called on this loss; rebuild the graph first")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros(node.shape, dtype=node.dtype)
            node.grad = node.grad + g
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._consumed = True
    return leaves


def zero_grad(params) -> None:
    for p in (params.values() if isinstance(params, dict) else params):
        p.grad = None


# --------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.dtype.type(s), (a,), lambda g: (g * a.dtype.type(s),))


def abs(a) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamped."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a, floor: float) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > floor
    return _make(np.where(keep, a.data, a.dtype.type(floor)), (a,), lambda g: (g * keep,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = _as_tensor(a)
    factor = np.where(a.data >= 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


# --------------------------------------------------------------------------
# reductions and reshaping

def sum(a, axes=(0, 1, 2, 3)) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = tuple(axes)
    return _make(a.data.sum(axis=axes, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a, axes=(0, 1, 2, 3)) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    n = int(np.prod([a.shape[i] for i in axes]))
    return _make(a.data.mean(axis=axes, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def masked_mean(a, mask) -> Tensor:
    """Mean of ``a`` over positions where ``mask`` is nonzero; 0 if none."""
    a = _as_tensor(a)
    m = np.broadcast_to(np.asarray(mask.data if isinstance(mask, Tensor) else mask) != 0, a.shape)
    n = int(m.sum())
    if n == 0:
        return _make(np.zeros((1, 1, 1, 1), dtype=a.dtype), (a,), lambda g: (np.zeros(a.shape, a.dtype),))
    total = np.where(m, a.data, 0).sum(dtype=np.float64) / n
    out = np.full((1, 1, 1, 1), total, dtype=a.dtype)
    return _make(out, (a,), lambda g: (np.where(m, g.reshape(()) / n, 0).astype(a.dtype),))


def concat_channels(tensors) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ContractError(f"concat_channels shape mismatch: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _make(out, tensors, lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def concat_batch(tensors) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[1:] != ref[1:]:
            raise ContractError(f"concat_batch shape mismatch: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)
    return _make(out, tensors, lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def slice_batch(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), bw)


def crop(a, h0: int, h1: int, w0: int, w1: int) -> Tensor:
    """Spatial slice ``a[:, :, h0:h1, w0:w1]``."""
    a = _as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, :, h0:h1, w0:w1] = g
        return (full,)

    return _make(a.data[:, :, h0:h1, w0:w1], (a,), bw)


# --------------------------------------------------------------------------
# convolution

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Patch matrix of shape (N*Ho*Wo, k*k*C), column order (ki, kj, c)."""
    n, c, h, w = x.shape
    xh = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xh[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, k * k * c), ho, wo


def _col2im(dcols: np.ndarray, xshape, k: int, stride: int, pad: int, ho: int, wo: int):
    n, c, h, w = xshape
    d = dcols.reshape(n, ho, wo, k, k, c)
    dx = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[:, :, :, i, j, :]
    return dx[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; ``weight`` is (out_c, in_c, k, k), ``bias`` (1, out_c, 1, 1)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    oc, ic, kh, kw = weight.shape
    if kh != kw:
        raise ContractError(f"square kernels only, got {kh}x{kw}")
    if x.shape[1] != ic:
        raise ContractError(f"conv2d: input has {x.shape[1]} channels, weight expects {ic}")
    n = x.shape[0]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kh:
        raise ContractError(f"conv2d: kernel {kh} larger than padded input {x.shape}")
    cols, ho, wo = _im2col(x.data, kh, stride, padding)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(oc, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (1, oc, 1, 1):
            raise ContractError(f"conv2d: bias shape {bias.shape} != (1, {oc}, 1, 1)")
        out += bias.data.reshape(1, oc)
    out = out.reshape(n, ho, wo, oc).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        gx = _col2im(g2 @ wmat, x.shape, kh, stride, padding, ho, wo) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(oc, kh, kw, ic).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0).reshape(1, oc, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def max_pool2d(x, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Max pooling; used for mask propagation only, so no gradient is recorded."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if padding:
        arr = np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                     constant_values=-np.inf)
    ho = (arr.shape[2] - k) // stride + 1
    wo = (arr.shape[3] - k) // stride + 1
    win = sliding_window_view(arr, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return Tensor(win.max(axis=(4, 5)).astype(get_dtype() if not isinstance(x, Tensor) else x.dtype))


def sparse_conv2d(x, mask, weight, bias=None, stride: int = 1, padding: int = 0):
    """Sparsity-invariant convolution.

    ``out = conv(x * mask, weight) / max(window_count(mask), eps) + bias``.
    Returns ``(out, out_mask)`` where ``out_mask`` is the max-pooled mask.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=x.dtype)
    if m.shape[1] != 1 or m.shape[0] != x.shape[0] or m.shape[2:] != x.shape[2:]:
        raise ContractError(f"sparse_conv2d: mask shape {m.shape} incompatible with input {x.shape}")
    m = m.astype(x.dtype)
    k = weight.shape[2]
    keep = m != 0
    # select rather than multiply so masked-out values are exactly +0
    masked = _make(np.where(keep, x.data, 0).astype(x.dtype), (x,), lambda g: (np.where(keep, g, 0),))
    num = conv2d(masked, weight, None, stride, padding)
    ones = np.ones((1, 1, k, k), dtype=x.dtype)
    count = conv2d(Tensor(m), Tensor(ones), None, stride, padding).data
    out = mul(num, Tensor(1.0 / np.maximum(count, SPARSE_EPS)))
    if bias is not None:
        out = add(out, bias)
    return out, max_pool2d(Tensor(m), k, stride, padding)


# --------------------------------------------------------------------------
# normalization

class RunningStats:
    """Per-channel running mean/variance for batch norm (mutable state, not a Tensor)."""

    def __init__(self, channels: int, dtype=None):
        dtype = dtype or get_dtype()
        self.mean = np.zeros((1, channels, 1, 1), dtype=dtype)
        self.var = np.ones((1, channels, 1, 1), dtype=dtype)

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float = BN_MOMENTUM) -> None:
        self.mean = (momentum * self.mean + (1 - momentum) * mean).astype(self.mean.dtype)
        self.var = (momentum * self.var + (1 - momentum) * var).astype(self.var.dtype)


def batch_norm(x, gamma, beta, stats: RunningStats | None, training: bool,
               eps: float = BN_EPS) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ContractError(f"batch_norm: gamma/beta must be (1, {c}, 1, 1)")
    if training:
        if n * h * w == 1:
            raise ContractError("batch_norm: batch statistics undefined for a single value per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        if stats is not None:
            stats.update(mu, var)
    else:
        if stats is None:
            raise ContractError("batch_norm: eval mode requires running statistics")
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    m = n * h * w

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gb = g.sum(axis=(0, 2, 3), keepdims=True)
        if training:
            gx = gamma.data * inv / m * (m * g - gb - xhat * gg)
        else:
            gx = g * gamma.data * inv
        return gx, gg, gb

    return _make(out.astype(x.dtype), (x, gamma, beta), bw)


# --------------------------------------------------------------------------
# resampling

def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Linear interpolation weights, align_corners=False, edge clamped."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale_ = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        mat[o, i0] += 1.0 - t
        mat[o, i1] += t
    return mat.astype(dtype)


def _adaptive_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        start = (o * n_in) // n_out
        stop = -((-(o + 1) * n_in) // n_out)
        mat[o, start:stop] = 1.0 / (stop - start)
    return mat.astype(dtype)


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    out = np.einsum("ih,nchw,jw->ncij", rows, x.data, cols, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", rows, g, cols, optimize=True),))


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    x = _as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ContractError("bilinear_resize: output size must be >= 1")
    if (out_h, out_w) == x.shape[2:]:
        return _make(x.data, (x,), lambda g: (g,))
    return _separable(x, _resize_matrix(x.shape[2], out_h, x.dtype), _resize_matrix(x.shape[3], out_w, x.dtype))


def adaptive_avg_pool2d(x, out_h: int, out_w: int) -> Tensor:
    x = _as_tensor(x)
    return _separable(x, _adaptive_matrix(x.shape[2], out_h, x.dtype), _adaptive_matrix(x.shape[3], out_w, x.dtype))


def avg_pool2d(x, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Average pooling over k x k windows (zero padding counted in the divisor)."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    ones = np.full((1, 1, k, k), 1.0 / (k * k), dtype=x.dtype)
    flat = Tensor(x.data.reshape(n * c, 1, h, w), requires_grad=False)
    out = conv2d(flat, Tensor(ones), None, stride, padding).data
    ho, wo = out.shape[2:]
    out = out.reshape(n, c, ho, wo)

    def bw(g):
        gcols = g.reshape(n * c, 1, ho, wo).transpose(0, 2, 3, 1).reshape(-1, 1) @ ones.reshape(1, -1)
        return (_col2im(gcols, (n * c, 1, h, w), k, stride, padding, ho, wo).reshape(n, c, h, w),)

    return _make(out, (x,), bw)


def softmax_channel(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return _make(p, (x,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def sample_horizontal(x, disparity) -> Tensor:
    """Sample ``x`` at ``(u - disparity(u, v), v)`` with 1-D linear interpolation.

    Source coordinates outside ``[0, W-1]`` yield 0 and no gradient.
    """
    x, disparity = _as_tensor(x), _as_tensor(disparity)
    n, c, h, w = x.shape
    if disparity.shape != (n, 1, h, w):
        raise ContractError(f"sample_horizontal: disparity shape {disparity.shape} != {(n, 1, h, w)}")
    cols = np.arange(w, dtype=np.float64).reshape(1, 1, 1, w)
    src = cols - disparity.data.astype(np.float64)
    valid = (src >= 0) & (src <= w - 1)
    srcc = np.where(valid, src, 0.0)
    i0 = np.minimum(np.floor(srcc).astype(np.int64), w - 1)
    i1 = np.minimum(i0 + 1, w - 1)
    t = (srcc - i0).astype(x.dtype)
    idx0 = np.broadcast_to(i0, (n, c, h, w))
    idx1 = np.broadcast_to(i1, (n, c, h, w))
    v0 = np.take_along_axis(x.data, idx0, axis=3)
    v1 = np.take_along_axis(x.data, idx1, axis=3)
    vm = valid.astype(x.dtype)
    out = ((1 - t) * v0 + t * v1) * vm

    def bw(g):
        gv = g * vm
        gx = None
        if x.requires_grad:
            gx = np.zeros((n * c * h, w), dtype=x.dtype)
            rows = np.repeat(np.arange(n * c * h), w)
            np.add.at(gx, (rows, idx0.reshape(-1)), ((1 - t) * gv).reshape(-1))
            np.add.at(gx, (rows, idx1.reshape(-1)), (t * gv).reshape(-1))
            gx = gx.reshape(n, c, h, w)
        gd = -(gv * (v1 - v0)).sum(axis=1, keepdims=True)
        return gx, gd

    return _make(out.astype(x.dtype), (x, disparity), bw)


def correlation(left, right, max_disp: int) -> Tensor:
    """Horizontal cost volume ``out[:, d, y, x] = mean_c left[:, c, y, x] * right[:, c, y, x - d]``."""
    left, right = _as_tensor(left), _as_tensor(right)
    if left.shape != right.shape:
        raise ContractError(f"correlation: shapes differ {left.shape} vs {right.shape}")
    n, c, h, w = left.shape
    out = np.zeros((n, max_disp + 1, h, w), dtype=left.dtype)
    for d in range(min(max_disp, w - 1) + 1):
        out[:, d, :, d:] = (left.data[:, :, :, d:] * right.data[:, :, :, :w - d]).sum(axis=1) / c

    def bw(g):
        gl = np.zeros_like(left.data)
        gr = np.zeros_like(right.data)
        for d in range(min(max_disp, w - 1) + 1):
            gd = g[:, d:d + 1, :, d:] / c
            gl[:, :, :, d:] += gd * right.data[:, :, :, :w - d]
            gr[:, :, :, :w - d] += gd * left.data[:, :, :, d:]
        return gl, gr

    return _make(out, (left, right), bw)
