"""
Dense tensors with reverse-mode differentiation

This module provides:
1. Tensor - a float32 (or float64 in shadow mode) n-dimensional array with an
   optional gradient slot
2. The primitive set the network is written in (matmul, convolutions, layer
   norm, activations, reshapes, resizes, ...), each registering itself on the
   dynamic graph when an input requires grad
3. OpGraph + backward() for reverse-mode differentiation
4. finite_diff_grad() / gradient_check() oracles computed in 64-bit
5. TSR1 tensor file encoding
"""

from __future__ import annotations

import contextlib
import struct
import threading
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from errors import ContractError, LoadError, NumericFault

LAYER_NORM_EPS = 1e-5
TSR1_MAGIC = b"TSR1\0\0\0\0"

_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def default_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the current thread"""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@contextlib.contextmanager
def shadow64() -> Iterator[None]:
    """Create new tensors in float64 (gradient-check shadow path)"""
    previous = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    """Dense float array with an optional gradient slot"""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else default_dtype()
        self.data: np.ndarray = np.asarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- introspection -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item: tensor has shape {self.shape}, expected one element")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op}{flag})"

    # -- operators -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def flip(self, axis: int):
        return flip(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def silu(self):
        return silu(self)

    def softplus(self):
        return softplus(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(value, like: np.dtype | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like if like is not None else default_dtype()))


def record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Wrap a primitive's output, registering it on the graph when an input requires grad"""
    if not np.all(np.isfinite(data)):
        raise NumericFault(f"{op}: non-finite values in output of shape {data.shape}", op=op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward = backward_fn
    else:
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("add", a, b)
    return record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("sub", a, b)
    return record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("mul", a, b)
    return record(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return record(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return record(
        a.data ** exponent, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
        "power",
    )


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a.data.dtype)
    if isinstance(b, Tensor):
        return _lift(a, b.data.dtype), b
    return _lift(a), _lift(b)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return record(out, (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    return record(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data).astype(a.data.dtype, copy=False)
    return record(out, (a,), lambda g: (g * expit(a.data),), "softplus")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), backward_fn, "log_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


# ---------------------------------------------------------------------------
# Reductions and linear algebra
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return record(np.asarray(out), (a,), backward_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return record(np.asarray(out), (a,), backward_fn, "mean")


def matmul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ContractError(f"matmul: incompatible batch extents {a.shape} @ {b.shape}") from None

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(out, (a, b), backward_fn, "matmul")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ContractError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort([ax % a.ndim for ax in axes]))
    return record(
        np.transpose(a.data, axes), (a,),
        lambda g: (np.transpose(g, inverse),),
        "transpose",
    )


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def flip(a: Tensor, axis: int) -> Tensor:
    return record(np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),), "flip")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat: no tensors given")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[ax] != tensors[0].shape[ax] for ax in range(t.ndim) if ax != axis
        ):
            raise ContractError(
                f"concat: extents {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ContractError(f"slice: range [{start}, {stop}) outside extent {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return record(a.data[index], (a,), backward_fn, "slice")


def split(a: Tensor, sections: int | Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along an axis into equal parts (int) or parts of the given sizes"""
    extent = a.shape[axis]
    if isinstance(sections, int):
        if sections < 1 or extent % sections:
            raise ContractError(f"split: extent {extent} not divisible into {sections} parts")
        sizes = [extent // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != extent:
            raise ContractError(f"split: sizes {sizes} do not sum to extent {extent}")
    parts, start = [], 0
    for size in sizes:
        parts.append(slice_axis(a, start, start + size, axis))
        start += size
    return parts


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather entries along one axis by an integer index array"""
    axis = axis % a.ndim
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ContractError(f"take: indices outside extent {a.shape[axis]}")

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return record(np.take(a.data, idx, axis=axis), (a,), backward_fn, "take")


def subsample(a: Tensor, factor: int = 2) -> Tensor:
    """Strided spatial downsample of a [B,H,W,C] map (keeps every factor-th pixel)"""
    if a.ndim != 4 or a.shape[1] % factor or a.shape[2] % factor:
        raise ContractError(f"subsample: extents {a.shape} not divisible by {factor}")

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[:, ::factor, ::factor, :] = g
        return (full,)

    return record(a.data[:, ::factor, ::factor, :], (a,), backward_fn, "subsample")


# ---------------------------------------------------------------------------
# Normalization, convolution and resampling
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Layer normalization over the last axis"""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ContractError(
            f"layer_norm: affine extents {gamma.shape}/{beta.shape} do not match width {x.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    reduce_axes = tuple(range(x.ndim - 1))

    def backward_fn(g):
        g_xhat = g * gamma.data
        gx = inv * (
            g_xhat
            - g_xhat.mean(axis=-1, keepdims=True)
            - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return record(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward_fn, "layer_norm")


def _conv_output_extent(op: str, extent: int, kernel: int, stride: int, padding: int) -> int:
    padded = extent + 2 * padding
    if padded < kernel:
        raise ContractError(f"{op}: kernel {kernel} larger than padded extent {padded}")
    return (padded - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution of a channels-last map: x [B,H,W,Ci], w [kh,kw,Ci,Co]"""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ContractError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    kh, kw, _, cout = w.shape
    batch, height, width, _ = x.shape
    out_h = _conv_output_extent("conv2d", height, kh, stride, padding)
    out_w = _conv_output_extent("conv2d", width, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out = np.zeros((batch, out_h, out_w, cout), dtype=np.result_type(x.data, w.data))

    def window(i, j):
        return (
            slice(None),
            slice(i, i + stride * (out_h - 1) + 1, stride),
            slice(j, j + stride * (out_w - 1) + 1, stride),
            slice(None),
        )

    for i in range(kh):
        for j in range(kw):
            out += xp[window(i, j)] @ w.data[i, j]
    if b is not None:
        out += b.data

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                sl = window(i, j)
                gw[i, j] = np.tensordot(xp[sl], g, axes=([0, 1, 2], [0, 1, 2]))
                gxp[sl] += g @ w.data[i, j].T
        gx = gxp[:, padding:padding + height, padding:padding + width, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, backward_fn, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Per-channel 2D convolution, stride 1: x [B,H,W,C], w [kh,kw,C]"""
    if x.ndim != 4 or w.ndim != 3 or x.shape[3] != w.shape[2]:
        raise ContractError(f"depthwise_conv2d: input {x.shape} incompatible with kernel {w.shape}")
    kh, kw, _ = w.shape
    _, height, width, _ = x.shape
    out_h = _conv_output_extent("depthwise_conv2d", height, kh, 1, padding)
    out_w = _conv_output_extent("depthwise_conv2d", width, kw, 1, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out = np.zeros(x.shape[:1] + (out_h, out_w) + x.shape[3:], dtype=np.result_type(x.data, w.data))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + out_h, j:j + out_w, :] * w.data[i, j]
    if b is not None:
        out += b.data

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + out_h, j:j + out_w, :]
                gw[i, j] = (patch * g).sum(axis=(0, 1, 2))
                gxp[:, i:i + out_h, j:j + out_w, :] += g * w.data[i, j]
        grads = [gxp[:, padding:padding + height, padding:padding + width, :], gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, backward_fn, "depthwise_conv2d")


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Causal per-channel 1D convolution: x [B,L,C], w [K,C]; y_t sees x_{t-K+1..t}"""
    if x.ndim != 3 or w.ndim != 2 or x.shape[2] != w.shape[1]:
        raise ContractError(f"causal_conv1d: input {x.shape} incompatible with kernel {w.shape}")
    width = w.shape[0]
    length = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (width - 1, 0), (0, 0)))
    out = np.zeros(x.shape, dtype=np.result_type(x.data, w.data))
    for k in range(width):
        out += xp[:, k:k + length, :] * w.data[k]
    if b is not None:
        out += b.data

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for k in range(width):
            gw[k] = (xp[:, k:k + length, :] * g).sum(axis=(0, 1))
            gxp[:, k:k + length, :] += g * w.data[k]
        grads = [gxp[:, width - 1:, :], gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, backward_fn, "causal_conv1d")


def interpolation_matrix(n_in: int, n_out: int, mode: str = "bilinear") -> np.ndarray:
    """Row-stochastic [n_out, n_in] resampling matrix with half-pixel centers"""
    if n_in < 1 or n_out < 1:
        raise ContractError(f"resize: extents must be positive, got {n_in} -> {n_out}")
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    rows = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum(np.floor((rows + 0.5) * scale).astype(np.int64), n_in - 1)
        matrix[rows, src] = 1.0
    elif mode == "bilinear":
        src = np.clip((rows + 0.5) * scale - 0.5, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        np.add.at(matrix, (rows, lo), 1.0 - frac)
        np.add.at(matrix, (rows, hi), frac)
    else:
        raise ContractError(f"resize: unknown mode {mode!r}")
    return matrix


def resize_array(a: np.ndarray, size: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Resize axes 0 and 1 of an array [H,W,...] (numpy path used by the data pipeline)"""
    mh = interpolation_matrix(a.shape[0], size[0], mode)
    mw = interpolation_matrix(a.shape[1], size[1], mode)
    out = np.tensordot(mh, a, axes=([1], [0]))
    out = np.moveaxis(np.tensordot(mw, out, axes=([1], [1])), 0, 1)
    return out.astype(a.dtype, copy=False)


def resize(x: Tensor, size: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Resize a [B,H,W,C] map; bilinear uses half-pixel-center alignment"""
    if x.ndim != 4:
        raise ContractError(f"resize: expected [B,H,W,C], got {x.shape}")
    mh = interpolation_matrix(x.shape[1], size[0], mode).astype(x.data.dtype)
    mw = interpolation_matrix(x.shape[2], size[1], mode).astype(x.data.dtype)
    out = np.einsum("oh,bhwc,pw->bopc", mh, x.data, mw, optimize=True)

    def backward_fn(g):
        return (np.einsum("oh,bopc,pw->bhwc", mh, g, mw, optimize=True),)

    return record(out, (x,), backward_fn, f"resize_{mode}")


# ---------------------------------------------------------------------------
# Graph and backward pass
# ---------------------------------------------------------------------------

class OpGraph:
    """Topologically ordered record of the operations that produced a tensor"""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self._ids = {id(node) for node in nodes}

    @classmethod
    def trace(cls, root: Tensor) -> "OpGraph":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node: Tensor) -> bool:
        return id(node) in self._ids

    def leaves(self) -> list[Tensor]:
        return [node for node in self.nodes if node.is_leaf and node.requires_grad]

    def release(self) -> None:
        """Drop the recorded operations so intermediate buffers can be freed"""
        for node in self.nodes:
            node._parents = ()
            node._backward = None


def backward(loss: Tensor, graph: OpGraph | None = None, retain_graph: bool = False) -> None:
    """Populate .grad of every requires_grad leaf with d(loss)/d(leaf), accumulating"""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if graph is None:
        graph = OpGraph.trace(loss)
    elif loss not in graph:
        raise ContractError("backward: loss is not part of the given graph")
    if not loss.requires_grad:
        return

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            grad = np.asarray(grad, dtype=node.data.dtype).reshape(node.shape)
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    if not retain_graph:
        graph.release()


# ---------------------------------------------------------------------------
# Finite-difference oracles
# ---------------------------------------------------------------------------

def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-3) -> Tensor:
    """Central-difference gradient of a scalar function, accumulated in float64"""
    if eps <= 0:
        raise ContractError(f"finite_diff_grad: eps must be positive, got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    probe = base.copy()
    with no_grad():
        for i in range(base.size):
            probe.flat[i] = base.flat[i] + eps
            plus = _scalar(f(Tensor(probe.copy())))
            probe.flat[i] = base.flat[i] - eps
            minus = _scalar(f(Tensor(probe.copy())))
            probe.flat[i] = base.flat[i]
            grad.flat[i] = (plus - minus) / (2.0 * eps)
    return Tensor(grad)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between backward() and central differences over several tensors

    fn recomputes the scalar loss from the current tensor values. Tensors must
    be float64 (see shadow64 / Module.astype) so the probes are not swamped by
    rounding. Probed coordinates are sampled when max_coords is set.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ContractError(f"gradient_check: tensor {t.shape} is {t.data.dtype}, expected float64")
        t.grad = None
    backward(fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        with no_grad():
            for k, i in enumerate(coords):
                original = t.data.flat[i]
                t.data.flat[i] = original + eps
                plus = _scalar(fn())
                t.data.flat[i] = original - eps
                minus = _scalar(fn())
                t.data.flat[i] = original
                numeric[k] = (plus - minus) / (2.0 * eps)
        worst = max(worst, relative_error(analytic.flat[coords], numeric))
    return worst


# ---------------------------------------------------------------------------
# TSR1 tensor files
# ---------------------------------------------------------------------------

def encode_tsr1(array) -> bytes:
    """Magic, u32 rank, rank x u64 extents, row-major little-endian float32"""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = TSR1_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tsr1(buffer: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode one TSR1 tensor starting at offset; returns (array, end offset)"""
    view = memoryview(buffer)
    if bytes(view[offset:offset + 8]) != TSR1_MAGIC:
        raise LoadError(f"{source}: bad TSR1 magic at byte {offset}")
    if len(view) < offset + 12:
        raise LoadError(f"{source}: truncated TSR1 header")
    (rank,) = struct.unpack_from("<I", view, offset + 8)
    dims_end = offset + 12 + 8 * rank
    if len(view) < dims_end:
        raise LoadError(f"{source}: truncated TSR1 extents (rank {rank})")
    shape = struct.unpack_from(f"<{rank}Q", view, offset + 12)
    count = int(np.prod(shape)) if rank else 1
    end = dims_end + 4 * count
    if len(view) < end:
        raise LoadError(f"{source}: TSR1 payload holds fewer than {count} floats")
    data = np.frombuffer(view[dims_end:end], dtype="<f4").astype(np.float32).reshape(shape)
    return data, end


def save_tsr1(path: str | Path, array) -> Path:
    path = Path(path)
    path.write_bytes(encode_tsr1(array))
    return path


def load_tsr1(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as e:
        raise LoadError(f"{path}: {e}") from e
    array, end = decode_tsr1(buffer, 0, str(path))
    if end != len(buffer):
        raise LoadError(f"{path}: {len(buffer) - end} trailing bytes after TSR1 payload")
    return array
