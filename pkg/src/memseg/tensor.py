"""Dense float tensors with reverse-mode automatic differentiation.

Everything is numpy underneath. Ops record their backward rule on the
thread's active :class:`Tape`; ``tape.backward(loss)`` walks the recorded
ops once, in reverse creation order, accumulating gradients into ``.grad``.

Values are float32 by default. Non-finite op outputs raise immediately
instead of propagating NaN/Inf through the graph.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An op was configured outside its contract (kernel extents, axes...)."""


class NumericsError(ArithmeticError):
    """An op produced NaN or Inf."""


_state = threading.local()

# float32 is the production dtype. Gradient-check tests flip this to
# float64 because central differences at step 1e-3 sit below the f32
# rounding noise floor.
_DEFAULT_DTYPE = np.float32


def default_dtype():
    return getattr(_state, "dtype", _DEFAULT_DTYPE)


class use_dtype:
    """Context manager switching the dtype new tensors are created with."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        self._saved = default_dtype()
        _state.dtype = self.dtype
        return self

    def __exit__(self, *exc):
        _state.dtype = self._saved
        return False


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of ops from one forward pass.

    Creation order is topological by construction (an op's inputs always
    exist before its output), so backward is a single reverse walk. A tape
    belongs to one training step on one thread.
    """

    def __init__(self):
        self._ops = []

    def __enter__(self):
        if _active_tape() is not None:
            raise ConfigError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def __len__(self):
        return len(self._ops)

    def record(self, out, backward):
        self._ops.append((out, backward))

    def backward(self, loss):
        """Seed ``loss.grad`` with ones and propagate through every recorded op.

        Intermediate output grads are consumed as the walk passes them, so
        backward can run for several roots on one tape without recounting.
        Leaf tensors (parameters, inputs) keep their accumulated grads.
        """
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for out, backward in reversed(self._ops):
            if out.grad is not None:
                backward(out.grad)
                out.grad = None


def _ensure_finite(data, op):
    if not np.isfinite(data).all():
        raise NumericsError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        _ensure_finite(arr, "tensor")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def argmax(self, axis):
        return np.argmax(self.data, axis=axis)


def _result(data, inputs, backward, op):
    _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, backward)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# -- creation helpers ---------------------------------------------------

def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad)


def zeros(*shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad)


def ones(*shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad)


def param(rng, shape, scale=None):
    """Trainable tensor. Default scale is 1/sqrt(fan_in) on the last axis."""
    if scale is None:
        fan_in = shape[-1] if len(shape) > 1 else shape[0]
        scale = 1.0 / math.sqrt(max(fan_in, 1))
    data = (rng.standard_normal(shape) * scale).astype(default_dtype())
    return Tensor(data, requires_grad=True)


# -- elementwise --------------------------------------------------------

def _binary_shapes(a, b, op):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast allowed)")


def add(a, b):
    if isinstance(b, (int, float)):
        out_data = a.data + default_dtype()(b)

        def backward(g):
            _accum(a, g)

        return _result(out_data, (a,), backward, "add")
    _binary_shapes(a, b, "add")

    def backward(g):
        _accum(a, g if a.size > 1 or a.shape == g.shape else g.sum().reshape(a.shape))
        _accum(b, g if b.size > 1 or b.shape == g.shape else g.sum().reshape(b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        _accum(a, g if a.size > 1 or a.shape == g.shape else g.sum().reshape(a.shape))
        _accum(b, -g if b.size > 1 or b.shape == g.shape else -g.sum().reshape(b.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def neg(a):
    def backward(g):
        _accum(a, -g)

    return _result(-a.data, (a,), backward, "neg")


def mul(a, b):
    if isinstance(b, (int, float)):
        c = default_dtype()(b)

        def backward(g):
            _accum(a, g * c)

        return _result(a.data * c, (a,), backward, "mul")
    _binary_shapes(a, b, "mul")

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        _accum(a, ga if a.shape == ga.shape else ga.sum().reshape(a.shape))
        _accum(b, gb if b.shape == gb.shape else gb.sum().reshape(b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    _binary_shapes(a, b, "div")

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        _accum(a, ga if a.shape == ga.shape else ga.sum().reshape(a.shape))
        _accum(b, gb if b.shape == gb.shape else gb.sum().reshape(b.shape))

    return _result(a.data / b.data, (a, b), backward, "div")


def relu(a):
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _result(a.data * mask, (a,), backward, "relu")


def sigmoid(a):
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out_data[~pos] = e / (1.0 + e)

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), backward, "sigmoid")


# -- reductions and reshapes --------------------------------------------

def sum_(a, axis=None):
    out_data = np.asarray(a.data.sum(axis=axis), dtype=a.data.dtype)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _result(out_data, (a,), backward, "sum")


def mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    out_data = np.asarray(a.data.mean(axis=axis), dtype=a.data.dtype)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy())

    return _result(out_data, (a,), backward, "mean")


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _result(out_data, (a,), backward, "reshape")


def transpose(a, *axes):
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _result(out_data, (a,), backward, "transpose")


def concat(tensors, axis=0):
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _result(out_data, tuple(tensors), backward, "concat")


def select(a, axis, index):
    """Slice out index ``index`` along ``axis`` (the axis is dropped)."""
    if not 0 <= index < a.shape[axis]:
        raise ShapeError(f"select: index {index} out of range for axis {axis} of {a.shape}")
    out_data = np.ascontiguousarray(np.take(a.data, index, axis=axis))

    def backward(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.data.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        _accum(a, full)

    return _result(out_data, (a,), backward, "select")


def take_rows(table, indices):
    """Gather rows ``table[indices]``; gradient scatter-adds (repeats accumulate)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: index out of range for table with {table.shape[0]} rows")
    out_data = table.data[idx].copy()

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accum(table, full)

    return _result(out_data, (table,), backward, "take_rows")


def pick(a, col_indices):
    """``a[i, col_indices[i]]`` for a 2-D tensor; used by cross-entropy."""
    idx = np.asarray(col_indices, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, idx].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        _accum(a, full)

    return _result(out_data, (a,), backward, "pick")


def take_along(a, indices, axis):
    """``np.take_along_axis`` with scatter-add backward."""
    idx = np.asarray(indices, dtype=np.int64)
    out_data = np.take_along_axis(a.data, idx, axis=axis).copy()

    def backward(g):
        full = np.zeros_like(a.data)
        grids = list(np.meshgrid(*[np.arange(s) for s in idx.shape], indexing="ij"))
        grids[axis] = idx
        np.add.at(full, tuple(grids), g)
        _accum(a, full)

    return _result(out_data, (a,), backward, "take_along")


# -- linear algebra ------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def bmm(a, b):
    """Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm expects 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: shapes {a.shape} x {b.shape} do not chain")

    def backward(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _result(np.matmul(a.data, b.data), (a, b), backward, "bmm")


def add_bias(x, b):
    """Add a vector along the last axis of a 2-D (or 3-D) tensor."""
    if x.shape[-1] != b.shape[0] or b.data.ndim != 1:
        raise ShapeError(f"add_bias: {x.shape} + {b.shape}")

    def backward(g):
        _accum(x, g)
        _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(x.data + b.data, (x, b), backward, "add_bias")


# -- softmax family ------------------------------------------------------

def softmax(x, axis):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, out_data * (g - dot))

    return _result(out_data, (x,), backward, "softmax")


def log_softmax(x, axis):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        soft = np.exp(out_data)
        _accum(x, g - soft * g.sum(axis=axis, keepdims=True))

    return _result(out_data, (x,), backward, "log_softmax")


# -- normalization -------------------------------------------------------

def layer_norm(x, eps=1e-5):
    """Normalize over the last axis to zero mean, unit variance."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    out_data = centered * inv

    def backward(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out_data).mean(axis=-1, keepdims=True)
        _accum(x, (g - gm - out_data * gy) * inv)

    return _result(out_data, (x,), backward, "layer_norm")


# -- convolution ---------------------------------------------------------

def _xcorr2d(x4, k4):
    """'same'-padded stride-1 cross-correlation, [B,C,H,W] x [O,C,kh,kw]."""
    kh, kw = k4.shape[2], k4.shape[3]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("oiyx,bihwyx->bohw", k4, win, optimize=True), xp


def conv2d(x, k, bias=None):
    """Same-padded 2-D cross-correlation.

    ``x`` is [C,H,W] or [B,C,H,W]; ``k`` is [O,C,kh,kw] with odd extents.
    """
    if k.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got {k.shape}")
    kh, kw = k.shape[2], k.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d: kernel extents must be odd for same padding, got {kh}x{kw}")
    squeeze = x.data.ndim == 3
    x4 = x.data[None] if squeeze else x.data
    if x4.ndim != 4 or x4.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {k.shape}")
    out_data, xp = _xcorr2d(x4, k.data)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        # input grad: correlate g with the channel-swapped, spatially flipped kernel
        k_sw = np.ascontiguousarray(k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _xcorr2d(g4, k_sw)
        _accum(x, gx[0] if squeeze else gx)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        _accum(k, np.einsum("bohw,bihwyx->oiyx", g4, win, optimize=True))
        if bias is not None:
            _accum(bias, g4.sum(axis=(0, 2, 3)))

    inputs = (x, k) if bias is None else (x, k, bias)
    return _result(np.ascontiguousarray(out_data), inputs, backward, "conv2d")


def _xcorr3d(x5, k5):
    kd, kh, kw = k5.shape[2], k5.shape[3], k5.shape[4]
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    xp = np.pad(x5, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    return np.einsum("oizyx,bidhwzyx->bodhw", k5, win, optimize=True), xp


def conv3d(x, k, bias=None):
    """Same-padded 3-D cross-correlation; ``x`` [C,D,H,W] or [B,C,D,H,W]."""
    if k.data.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be 5-D, got {k.shape}")
    kd, kh, kw = k.shape[2], k.shape[3], k.shape[4]
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv3d: kernel extents must be odd, got {kd}x{kh}x{kw}")
    squeeze = x.data.ndim == 4
    x5 = x.data[None] if squeeze else x.data
    if x5.ndim != 5 or x5.shape[1] != k.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} does not match kernel {k.shape}")
    out_data, xp = _xcorr3d(x5, k.data)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None, None]
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        g5 = g[None] if squeeze else g
        k_sw = np.ascontiguousarray(k.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        gx, _ = _xcorr3d(g5, k_sw)
        _accum(x, gx[0] if squeeze else gx)
        win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
        _accum(k, np.einsum("bodhw,bidhwzyx->oizyx", g5, win, optimize=True))
        if bias is not None:
            _accum(bias, g5.sum(axis=(0, 2, 3, 4)))

    inputs = (x, k) if bias is None else (x, k, bias)
    return _result(np.ascontiguousarray(out_data), inputs, backward, "conv3d")


def avg_pool2(x):
    """2x2 average pooling; spatial extents must be even."""
    squeeze = x.data.ndim == 3
    x4 = x.data[None] if squeeze else x.data
    b, c, h, w = x4.shape
    if h % 2 or w % 2:
        raise ConfigError(f"avg_pool2: extents must be even, got {h}x{w}")
    out_data = x4.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gx = np.repeat(np.repeat(g4, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=g.dtype)
        _accum(x, gx[0] if squeeze else gx)

    return _result(np.ascontiguousarray(out_data), (x,), backward, "avg_pool2")


def _interp_matrix(n_in, n_out, dtype):
    """Row-interpolation matrix for align-corners-false bilinear resizing."""
    r = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == n_out:
        np.fill_diagonal(r, 1)
        return r
    s = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0, n_in - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (s - i0).astype(dtype)
    rows = np.arange(n_out)
    np.add.at(r, (rows, i0), 1 - w)
    np.add.at(r, (rows, i1), w)
    return r


def resize_bilinear(x, out_h, out_w):
    """Align-corners-false bilinear resize of [C,H,W] or [B,C,H,W]."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize_bilinear: output extents must be >= 1, got {out_h}x{out_w}")
    squeeze = x.data.ndim == 3
    x4 = x.data[None] if squeeze else x.data
    h, w = x4.shape[2], x4.shape[3]
    if h == out_h and w == out_w:
        out_data = x.data.copy()

        def backward_id(g):
            _accum(x, g)

        return _result(out_data, (x,), backward_id, "resize_bilinear")
    ry = _interp_matrix(h, out_h, x.data.dtype)
    rx = _interp_matrix(w, out_w, x.data.dtype)
    out_data = np.einsum("oh,pw,bchw->bcop", ry, rx, x4, optimize=True)
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gx = np.einsum("oh,pw,bcop->bchw", ry, rx, g4, optimize=True)
        _accum(x, gx[0] if squeeze else gx)

    return _result(np.ascontiguousarray(out_data), (x,), backward, "resize_bilinear")


# -- losses / composites --------------------------------------------------

def bce_with_logits(x, target):
    """Elementwise binary cross-entropy on logits. ``target`` is 0/1 (ndarray)."""
    t = np.asarray(target, dtype=x.data.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"bce_with_logits: target shape {t.shape} != {x.shape}")
    out_data = np.maximum(x.data, 0) - x.data * t + np.log1p(np.exp(-np.abs(x.data)))

    def backward(g):
        pos = x.data >= 0
        s = np.empty_like(x.data)
        s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
        e = np.exp(x.data[~pos])
        s[~pos] = e / (1.0 + e)
        _accum(x, g * (s - t))

    return _result(out_data, (x,), backward, "bce_with_logits")


def attention(q, k, v):
    """Scaled dot-product attention: softmax(q k^T / sqrt(dk)) v, single head."""
    if k.shape[0] == 0:
        raise ConfigError("attention: empty key set")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query dim {q.shape} != key dim {k.shape}")
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


def battention(q, k, v):
    """Batched attention over leading axis: [B,Lq,D] x [B,Lk,D] x [B,Lk,Dv]."""
    if k.shape[1] == 0:
        raise ConfigError("battention: empty key set")
    scores = mul(bmm(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(q.shape[-1]))
    return bmm(softmax(scores, axis=-1), v)
