"""Dense tensors with reverse-mode automatic differentiation.

Every kernel is a plain function taking and returning :class:`Tensor`. While a
:class:`Graph` is active (``with Graph() as g:``) any kernel whose inputs
require gradients appends a node to it; :func:`backward` then walks the nodes in
reverse. Broadcasting is limited to tensor-scalar arithmetic, so shape bugs
surface as :class:`ShapeError` instead of silently producing the wrong extent.
"""
from __future__ import annotations

import math
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .exceptions import ConfigError, ContractError, GraphStateError, NumericError, ShapeError

__all__ = [
    "Tensor", "Graph", "backward", "forward_primitive", "finite_difference_check", "central_difference",
    "relative_error",
    "matmul", "linear", "conv2d", "softmax", "layer_norm", "batch_norm", "gelu", "relu",
    "sigmoid", "log", "exp", "softplus", "add", "sub", "mul", "div", "scale", "tsum", "mean",
    "global_avg_pool", "avg_pool2d", "resize_bilinear", "reshape", "transpose", "concat",
    "index", "broadcast_to", "set_debug", "bilinear_matrix",
]

_DEBUG = os.environ.get("TCAM_DEBUG", "") not in ("", "0")
_local = threading.local()


def set_debug(flag: bool) -> None:
    """Toggle NaN/Inf checks after every forward kernel."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has dims {self.dims}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def assign_(self, values: np.ndarray) -> None:
        """In-place value update. Reserved for optimizers."""
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise ShapeError(f"assign: {list(values.shape)} does not match {self.dims}")
        self.data[...] = values

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not a kernel; use mul with an explicit reciprocal")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class _Node:
    kind: str
    out: Tensor
    inputs: tuple
    grad_fn: Callable


@dataclass
class Graph:
    """Ordered record of executed kernels; append order is a topological order."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Graph":
        if self.consumed:
            raise GraphStateError("graph has already been back-propagated")
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def backward(self, root: Tensor) -> None:
        backward(self, root)

    def __len__(self) -> int:
        return len(self.nodes)


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NumericError(f"{kind} produced non-finite values from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    graph = _active()
    if graph is not None and any(t.requires_grad for t in inputs):
        if graph.consumed:
            raise GraphStateError("cannot record on a consumed graph")
        out.requires_grad = True
        graph.nodes.append(_Node(kind, out, tuple(inputs), grad_fn))
    return out


def backward(graph: Graph, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring gradients."""
    if graph.consumed:
        raise GraphStateError("backward already ran on this graph")
    if root.size != 1:
        raise ContractError(f"backward root must be a single element, got dims {root.dims}")
    produced = {id(n.out) for n in graph.nodes}
    if id(root) not in produced:
        raise ContractError("root was not produced by this graph")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                gi = np.asarray(gi, dtype=t.data.dtype)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    graph.nodes.clear()
    graph.consumed = True


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: extents {list(a.shape)} and {list(b.shape)} differ")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return _emit("add_scalar", a.data + c, (a,), lambda g: (g,))
    b = _wrap(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add(a, -float(b))
    b = _wrap(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    b = _wrap(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _emit("gelu", x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = a.data
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("softplus", y, (a,), lambda g: (g * sig,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(invalid="ignore", divide="ignore"):  # debug mode reports non-finite results in _emit
        y = np.log(x)
    return _emit("log", y, (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


# ---------------------------------------------------------------- reductions

def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    shape = a.shape
    y = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(y), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def global_avg_pool(a: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4 dims, got {a.dims}")
    return mean(a, axis=(2, 3))


def avg_pool2d(a: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling with window and stride ``kernel``."""
    if kernel < 1:
        raise ConfigError(f"pool kernel must be >= 1, got {kernel}")
    if a.ndim != 4:
        raise ShapeError(f"avg_pool2d expects 4 dims, got {a.dims}")
    b, c, h, w = a.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avg_pool2d: extent {h}x{w} not divisible by kernel {kernel}")
    if kernel == 1:
        return a
    ho, wo = h // kernel, w // kernel
    y = a.data.reshape(b, c, ho, kernel, wo, kernel).mean(axis=(3, 5))
    k2 = float(kernel * kernel)

    def grad_fn(g):
        gx = np.repeat(np.repeat(g / k2, kernel, axis=2), kernel, axis=3)
        return (gx,)

    return _emit("avg_pool2d", y, (a,), grad_fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: incompatible ranks {a.dims} @ {b.dims}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible extents {a.dims} @ {b.dims}")
    ad, bd = a.data, b.data
    y = np.matmul(ad, bd)

    def grad_fn(g):
        return np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)

    return _emit("matmul", y, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``; weight is (in, out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.dims} incompatible with weight {weight.dims}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.dims} does not match weight {weight.dims}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    wd = weight.data
    y = x2 @ wd
    if bias is not None:
        y = y + bias.data
    y = y.reshape(*lead, wd.shape[1])
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit("linear", y, inputs, grad_fn)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x is (B, C, H, W), weight is (O, C, kh, kw)."""
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: need stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.dims} incompatible with weight {weight.dims}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.dims} does not match weight {weight.dims}")
    b, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    wmat = weight.data.reshape(o, c * kh * kw)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    y = np.ascontiguousarray(y.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        dcols = g2 @ wmat
        if kh == 1 and kw == 1 and stride == 1 and padding == 0:
            gx = np.ascontiguousarray(dcols.reshape(b, h, w, c).transpose(0, 3, 1, 2))
        else:
            d6 = dcols.reshape(b, ho, wo, c, kh, kw)
            gxp = np.zeros((b, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit("conv2d", y, inputs, grad_fn)


# ---------------------------------------------------------------- normalization

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; the row max is subtracted before exponentiation."""
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (a,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-feature affine map."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine {gamma.dims}/{beta.dims} does not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def grad_fn(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", y, (x, gamma, beta), grad_fn)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel normalization of (B, C, H, W) input.

    In training mode batch statistics are used and, when ``update_stats`` is
    set, the running buffers are updated in place (unbiased variance).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects 4 dims, got {x.dims}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm: parameters do not match {c} channels")
    xd = x.data
    gam = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if update_stats:
            unbiased = var.reshape(c) * (m / max(m - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased

        def grad_fn(g):
            gh = g * gam
            gx = inv * (gh - gh.mean(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gh * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(xd.dtype)
        xhat = (xd - running_mean.reshape(1, c, 1, 1).astype(xd.dtype)) * inv

        def grad_fn(g):
            return g * gam * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    y = xhat * gam + beta.data.reshape(1, c, 1, 1)
    return _emit("batch_norm", y, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------- resampling

_INTERP_CACHE: dict = {}


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) 1-D linear interpolation operator with half-pixel centers."""
    key = (n_in, n_out)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - w1)
    np.add.at(mat, (rows, i1), w1)
    mat.setflags(write=False)
    _INTERP_CACHE[key] = mat
    return mat


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinearly resize the last two axes of ``x`` to ``size`` (half-pixel alignment)."""
    oh, ow = int(size[0]), int(size[1])
    if oh < 1 or ow < 1:
        raise ConfigError(f"resize target must be positive, got {size}")
    if x.ndim < 2:
        raise ShapeError(f"resize_bilinear needs at least 2 dims, got {x.dims}")
    h, w = x.shape[-2:]
    rh = bilinear_matrix(h, oh).astype(x.dtype, copy=False)
    rw = bilinear_matrix(w, ow).astype(x.dtype, copy=False)
    y = np.matmul(np.matmul(rh, x.data), rw.T)

    def grad_fn(g):
        return (np.matmul(np.matmul(rh.T, g), rw),)

    return _emit("resize_bilinear", y, (x,), grad_fn)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.dims} as {list(shape)}") from exc
    src = a.shape
    return _emit("reshape", y, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)) or len(axes) != a.ndim:
        raise ShapeError(f"transpose: axes {axes} invalid for {a.dims}")
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(a.data.transpose(axes))
    return _emit("transpose", y, (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: {t.dims} incompatible with {ref.dims} along axis {axis}")
    y = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", y, tuple(tensors), grad_fn)


def index(a: Tensor, idx) -> Tensor:
    """Basic (int/slice) indexing."""
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not isinstance(it, (int, slice, type(Ellipsis), np.integer)):
            raise ContractError(f"only int/slice indexing is supported, got {type(it).__name__}")
    y = a.data[idx]
    if y.size == 0:
        raise ShapeError(f"index {idx} selects nothing from {a.dims}")
    src_shape, dtype = a.shape, a.dtype

    def grad_fn(g):
        gx = np.zeros(src_shape, dtype=dtype)
        gx[idx] = g
        return (gx,)

    return _emit("index", np.array(y), (a,), grad_fn)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; axes of extent 1 (or missing leading axes) are tiled."""
    shape = tuple(int(s) for s in shape)
    try:
        y = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.dims} to {list(shape)}") from exc
    src = a.shape
    lead = len(shape) - len(src)

    def grad_fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _emit("broadcast_to", y, (a,), grad_fn)


# ---------------------------------------------------------------- dispatch

_KERNELS: dict[str, Callable] = {
    "matmul": matmul, "linear": linear, "conv2d": conv2d, "softmax": softmax,
    "layer_norm": layer_norm, "batch_norm": batch_norm, "gelu": gelu, "relu": relu,
    "sigmoid": sigmoid, "log": log, "exp": exp, "softplus": softplus, "add": add, "sub": sub,
    "mul": mul, "scale": scale, "sum": tsum, "mean": mean, "global_avg_pool": global_avg_pool,
    "avg_pool2d": avg_pool2d, "resize_bilinear": resize_bilinear, "reshape": reshape,
    "transpose": transpose, "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "index": index, "broadcast_to": broadcast_to,
}


def forward_primitive(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Run kernel ``kind`` by name. ``attrs`` are passed as keyword arguments."""
    try:
        fn = _KERNELS[kind]
    except KeyError:
        raise ConfigError(f"unknown kernel {kind!r}; known: {sorted(_KERNELS)}") from None
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------- gradient check

def finite_difference_check(
    fn: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Compare autodiff against central differences of a scalar function.

    Returns ``max_i |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)`` over the
    flat coordinates ``coords`` (all coordinates by default).
    """
    if step <= 0:
        raise ConfigError(f"step must be positive, got {step}")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    with Graph() as graph:
        p = Tensor(x0.copy(), requires_grad=True)
        out = fn(p)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function returned a non-finite value at the base point")
    if out.requires_grad:
        backward(graph, out)
    g_ad = np.zeros_like(x0) if p.grad is None else p.grad.reshape(-1)
    g_ad = g_ad.reshape(-1)

    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        worst = max(worst, relative_error(g_ad[i], central_difference(fn, x0, i, step)))
    return worst


def relative_error(g_ad: float, g_fd: float) -> float:
    return abs(g_ad - g_fd) / max(1e-12, abs(g_ad) + abs(g_fd))


def central_difference(fn: Callable[[Tensor], Tensor], x0: np.ndarray, i: int, step: float) -> float:
    """``(fn(x0 + step e_i) - fn(x0 - step e_i)) / (2 step)`` for flat coordinate ``i``."""
    flat = x0.reshape(-1)
    xp = flat.copy()
    xp[i] += step
    xm = flat.copy()
    xm[i] -= step
    g_fd = (_scalar(fn(Tensor(xp.reshape(x0.shape)))) - _scalar(fn(Tensor(xm.reshape(x0.shape))))) / (2.0 * step)
    if not math.isfinite(g_fd):
        raise NumericError(f"finite difference at coordinate {i} is not finite")
    return g_fd


def _scalar(t) -> float:
    v = t.item() if isinstance(t, Tensor) else float(t)
    if not math.isfinite(v):
        raise NumericError("function returned a non-finite value")
    return v
