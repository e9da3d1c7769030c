"""Dense tensors with tape-based reverse-mode differentiation.

All model math runs through the ops here. Data lives in numpy arrays
(float64 by default, float32 preserved when given); each op that sees a
gradient-requiring input attaches a backward closure, and ``backward()``
replays the tape in reverse topological order, visiting every node once.

Also provides the finite-difference gradient checker, a multiply-accumulate
counter for cost accounting, and the "HPT1" binary tensor format.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DataFormatError,
    NumericError,
    ShapeError,
    TruncatedError,
)

_GRAD_ENABLED = True
_DEBUG_FINITE = False
_MAC_COUNTER = None

_GELU_C = float(np.sqrt(2.0 / np.pi))  # python float: keeps float32 graphs float32
_GELU_A = 0.044715


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every public op (off by default)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class MacCounter:
    """Accumulates multiply-accumulate counts from matmul/conv kernels."""

    def __init__(self):
        self.total = 0


@contextmanager
def count_macs_scope():
    """Count MACs executed by matmul and depthwise_conv1d in this scope.

    Only true multiply-accumulate kernels are counted; elementwise scaling,
    normalization, softmax and pooling contribute zero, matching the
    closed-form accounting in :mod:`histlift.model`.
    """
    global _MAC_COUNTER
    prev = _MAC_COUNTER
    counter = MacCounter()
    _MAC_COUNTER = counter
    try:
        yield counter
    finally:
        _MAC_COUNTER = prev


def _check_finite(arr):
    if _DEBUG_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value produced by tensor op")


class Tensor:
    """A dense real array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._prev = ()

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff machinery -------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded tape."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                # free the closure and saved activations once consumed
                node._backward = None
                node._prev = ()

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            out = _make(self.data + other, (self,))
            if out._prev:
                a = self
                out._backward = lambda g: _acc(a, g)
            return out
        other = _as_tensor(other)
        out = _make(np.add(self.data, other.data), (self, other))
        if out._prev:
            a, b = self, other

            def bwd(g):
                _acc(a, _unbroadcast(g, a.data.shape))
                _acc(b, _unbroadcast(g, b.data.shape))

            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out._prev:
            a = self
            out._backward = lambda g: _acc(a, -g)
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            out = _make(self.data * other, (self,))
            if out._prev:
                a = self
                out._backward = lambda g: _acc(a, g * other)
            return out
        other = _as_tensor(other)
        out = _make(np.multiply(self.data, other.data), (self, other))
        if out._prev:
            a, b = self, other
            ad, bd = a.data, b.data

            def bwd(g):
                _acc(a, _unbroadcast(g * bd, ad.shape))
                _acc(b, _unbroadcast(g * ad, bd.shape))

            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        return self * _as_tensor(other).pow(-1.0)

    def pow(self, exponent: float) -> "Tensor":
        out = _make(np.power(self.data, exponent), (self,))
        if out._prev:
            a, x = self, self.data

            def bwd(g):
                _acc(a, g * (exponent * np.power(x, exponent - 1.0)))

            out._backward = bwd
        return out

    def sqrt(self) -> "Tensor":
        return self.pow(0.5)

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} x {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
        try:
            data = np.matmul(a, b)
        except ValueError as exc:
            raise ShapeError(f"matmul batch dims incompatible: {a.shape} x {b.shape}") from exc
        if _MAC_COUNTER is not None:
            batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
            _MAC_COUNTER.total += int(np.prod(batch, dtype=np.int64)) * a.shape[-2] * a.shape[-1] * b.shape[-1]
        out = _make(data, (self, other))
        if out._prev:
            ta, tb = self, other

            def bwd(g):
                # contiguous transposes keep the batched gemm on the fast path
                if ta.requires_grad:
                    bt = np.swapaxes(b, -1, -2)
                    if b.ndim > 2:
                        bt = np.ascontiguousarray(bt)
                    _acc(ta, _unbroadcast(np.matmul(g, bt), a.shape))
                if tb.requires_grad:
                    at = np.swapaxes(a, -1, -2)
                    if a.ndim > 2:
                        at = np.ascontiguousarray(at)
                    _acc(tb, _unbroadcast(np.matmul(at, g), b.shape))

            out._backward = bwd
        return out

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        if out._prev:
            a, orig = self, self.data.shape
            out._backward = lambda g: _acc(a, g.reshape(orig))
        return out

    def transpose(self, axes) -> "Tensor":
        axes = tuple(axes)
        out = _make(np.transpose(self.data, axes), (self,))
        if out._prev:
            a = self
            inv = tuple(np.argsort(axes))
            out._backward = lambda g: _acc(a, np.transpose(g, inv))
        return out

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        axes = list(range(self.data.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(axes)

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        """Slice ``length`` entries from ``start`` along ``axis``."""
        index = [slice(None)] * self.data.ndim
        index[axis] = slice(start, start + length)
        index = tuple(index)
        out = _make(self.data[index], (self,))
        if out._prev:
            a, shape = self, self.data.shape

            def bwd(g):
                full = np.zeros(shape, dtype=g.dtype)
                full[index] = g
                _acc(a, full)

            out._backward = bwd
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._prev:
            a, shape = self, self.data.shape

            def bwd(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                _acc(a, np.broadcast_to(g, shape))

            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- nonlinearities ---------------------------------------------------------

    def gelu(self) -> "Tensor":
        """Tanh-form GELU: 0.5 x (1 + tanh(c (x + a x^3)))."""
        x = self.data
        inner = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
        out = _make(0.5 * x * (1.0 + inner), (self,))
        if out._prev:
            a = self

            def bwd(g):
                slope = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
                _acc(a, g * (0.5 * (1.0 + inner) + 0.5 * x * (1.0 - inner * inner) * slope))

            out._backward = bwd
        return out


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data, prev) -> Tensor:
    _check_finite(data)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in prev):
        out.requires_grad = True
        out._prev = tuple(prev)
    return out


def _acc(tensor: Tensor, grad) -> None:
    if tensor.requires_grad:
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _toposort(root: Tensor):
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._prev))]
    while stack:
        node, children = stack[-1]
        for child in children:
            if id(child) not in seen and child._prev:
                seen.add(id(child))
                stack.append((child, iter(child._prev)))
                break
            if id(child) not in seen:
                seen.add(id(child))
        else:
            order.append(node)
            stack.pop()
    return order


# -- named ops ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _as_tensor(a) @ _as_tensor(b)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along ``axis``."""
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.data.shape}")
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    np.divide(y, y.sum(axis=axis, keepdims=True), out=y)
    out = _make(y, (x,))
    if out._prev:
        a = x

        def bwd(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _acc(a, (g - dot) * y)

        out._backward = bwd
    return out


def rms_norm(x: Tensor, axis: int = -1, eps: float = 1e-6, gain: Tensor | None = None) -> Tensor:
    """x / sqrt(mean(x^2, axis) + eps), with an optional fused gain.

    The bare form carries no learnable parameter; passing ``gain`` multiplies
    the normalized output elementwise (broadcast over leading axes) in the
    same op.
    """
    x = _as_tensor(x)
    if eps < 0:
        raise ConfigError("rms_norm eps must be >= 0")
    d = x.data
    if not -d.ndim <= axis < d.ndim:
        raise ShapeError(f"rms_norm axis {axis} out of range for shape {d.shape}")
    n = d.shape[axis]
    scale = 1.0 / np.sqrt(np.mean(d * d, axis=axis, keepdims=True) + eps)
    normed = d * scale
    if gain is None:
        out = _make(normed, (x,))
        if out._prev:
            a = x

            def bwd(g):
                gx = (g * d).sum(axis=axis, keepdims=True)
                _acc(a, g * scale - d * (gx * scale**3 / n))

            out._backward = bwd
        return out

    gd = gain.data
    out = _make(normed * gd, (x, gain))
    if out._prev:
        a, b = x, gain

        def bwd(g):
            _acc(b, _unbroadcast(g * normed, gd.shape))
            gg = g * gd
            gx = (gg * d).sum(axis=axis, keepdims=True)
            _acc(a, gg * scale - d * (gx * scale**3 / n))

        out._backward = bwd
    return out


def adaptive_avg_pool(x: Tensor, axis: int, out_size: int) -> Tensor:
    """Average-pool ``axis`` down to ``out_size`` bins.

    Bin i covers input slice [floor(i*L/out), floor((i+1)*L/out)), so the
    bins tile the axis exactly once.
    """
    x = _as_tensor(x)
    d = x.data
    axis = axis % d.ndim
    length = d.shape[axis]
    if not 1 <= out_size <= length:
        raise ConfigError(f"adaptive_avg_pool out_size {out_size} not in [1, {length}]")
    edges = [(i * length) // out_size for i in range(out_size + 1)]
    moved = np.moveaxis(d, axis, 0)
    y = np.stack([moved[edges[i]:edges[i + 1]].mean(axis=0) for i in range(out_size)])
    out = _make(np.moveaxis(y, 0, axis), (x,))
    if out._prev:
        a = x

        def bwd(g):
            gm = np.moveaxis(g, axis, 0)
            full = np.zeros_like(moved)
            for i in range(out_size):
                lo, hi = edges[i], edges[i + 1]
                full[lo:hi] = gm[i] / (hi - lo)
            _acc(a, np.moveaxis(full, 0, axis))

        out._backward = bwd
    return out


def depthwise_conv1d(x: Tensor, kernel: Tensor, axis: int = -2) -> Tensor:
    """Per-channel 1-D convolution along ``axis`` with zero padding.

    ``x`` has channels on the last axis, ``kernel`` is (channels, k) with k
    odd; the output shape equals the input shape.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    d, kd = x.data, kernel.data
    axis = axis % d.ndim
    if axis == d.ndim - 1:
        raise ConfigError("depthwise_conv1d axis may not be the channel axis")
    if kd.ndim != 2 or kd.shape[0] != d.shape[-1]:
        raise ShapeError(f"kernel shape {kd.shape} does not match channels {d.shape[-1]}")
    k = kd.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"depthwise_conv1d kernel width must be odd, got {k}")
    pad = (k - 1) // 2
    xm = np.moveaxis(d, axis, -2)
    length = xm.shape[-2]
    pad_spec = [(0, 0)] * xm.ndim
    pad_spec[-2] = (pad, pad)
    xp = np.pad(xm, pad_spec)
    y = np.zeros_like(xm)
    for tap in range(k):
        y += xp[..., tap:tap + length, :] * kd[:, tap]
    if _MAC_COUNTER is not None:
        _MAC_COUNTER.total += int(np.prod(xm.shape, dtype=np.int64)) * k
    out = _make(np.moveaxis(y, -2, axis), (x, kernel))
    if out._prev:
        tx, tk = x, kernel

        def bwd(g):
            gm = np.moveaxis(g, axis, -2)
            gp = np.pad(gm, pad_spec)
            gx = np.zeros_like(xm)
            gk = np.zeros_like(kd)
            reduce_axes = tuple(range(gm.ndim - 1))
            for tap in range(k):
                gx += gp[..., k - 1 - tap:k - 1 - tap + length, :] * kd[:, tap]
                gk[:, tap] = (gm * xp[..., tap:tap + length, :]).sum(axis=reduce_axes)
            _acc(tx, np.moveaxis(gx, -2, axis))
            _acc(tk, gk)

        out._backward = bwd
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _make(data, tuple(tensors))
    if out._prev:
        sizes = [t.data.shape[axis] for t in tensors]

        def bwd(g):
            offset = 0
            for t, s in zip(tensors, sizes):
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + s)
                _acc(t, g[tuple(index)])
                offset += s

        out._backward = bwd
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    out = _make(data, tuple(tensors))
    if out._prev:

        def bwd(g):
            gm = np.moveaxis(g, axis, 0)
            for i, t in enumerate(tensors):
                _acc(t, gm[i])

        out._backward = bwd
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ConfigError(f"dropout probability must be < 1, got {p}")
    x = _as_tensor(x)
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return x * Tensor(mask.astype(x.data.dtype))


# -- gradient checking ---------------------------------------------------------


def grad_check(f, params, eps: float = 1e-5, coords=None) -> float:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``params`` are the leaf tensors perturbed by the check. Returns the max
    over checked coordinates of |analytic - numeric| / max(1, |numeric|).
    ``coords`` optionally restricts the sweep to [(param_index, flat_index)]
    pairs; by default every coordinate of every parameter is visited.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f()
    if not np.isfinite(out.data):
        raise NumericError("grad_check: function value is not finite")
    out.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    if coords is None:
        coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]

    worst = 0.0
    with no_grad():
        for pi, flat in coords:
            p = params[pi]
            orig = p.data.flat[flat]
            p.data.flat[flat] = orig + eps
            f_hi = float(f().data)
            p.data.flat[flat] = orig - eps
            f_lo = float(f().data)
            p.data.flat[flat] = orig
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                raise NumericError("grad_check: perturbed function value is not finite")
            numeric = (f_hi - f_lo) / (2.0 * eps)
            rel = abs(analytic[pi].flat[flat] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, rel)
    return worst


# -- HPT1 binary tensor format ---------------------------------------------------

_HPT1_MAGIC = b"HPT1"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(fh, array) -> None:
    """Write one array in HPT1 format to a binary file object."""
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    if arr.dtype not in _TAG_FOR_DTYPE:
        raise ConfigError(f"HPT1 stores f32/f64 only, got {arr.dtype}")
    fh.write(_HPT1_MAGIC)
    fh.write(struct.pack("<BB", _TAG_FOR_DTYPE[arr.dtype], arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(fh) -> np.ndarray:
    """Read one HPT1 array from a binary file object."""
    magic = fh.read(4)
    if len(magic) < 4:
        raise TruncatedError("HPT1: file ended inside header")
    if magic != _HPT1_MAGIC:
        raise BadMagicError(f"HPT1: bad magic {magic!r}")
    header = fh.read(2)
    if len(header) < 2:
        raise TruncatedError("HPT1: file ended inside header")
    tag, rank = struct.unpack("<BB", header)
    if tag not in _DTYPE_TAGS:
        raise DataFormatError(f"HPT1: unknown dtype tag {tag}")
    shape = []
    for _ in range(rank):
        raw = fh.read(4)
        if len(raw) < 4:
            raise TruncatedError("HPT1: file ended inside shape")
        shape.append(struct.unpack("<I", raw)[0])
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        raise TruncatedError("HPT1: file ended inside payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("=")).copy()


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
