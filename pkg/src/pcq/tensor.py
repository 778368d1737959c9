"""Dense tensors with a reverse-mode differentiation tape.

A ``Tensor`` wraps a contiguous numpy array (float32 or float64) plus an
optional gradient.  Differentiable operations executed while a ``Tape`` is
active append a record (output, inputs, backward closure) in execution
order; ``Tape.backward`` replays the records in reverse and accumulates
gradients on every leaf with ``requires_grad``.  Running without an active
tape is the inference fast path: nothing is recorded.

Gradients of every operation here are checked against central finite
differences (see ``grad_check``); float64 inputs keep that check reliable.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeMismatch(ValueError):
    pass


class InvalidAxis(ValueError):
    pass


class NotScalar(ValueError):
    pass


_STATE = threading.local()


def _tape_stack():
    if not hasattr(_STATE, "tapes"):
        _STATE.tapes = []
    return _STATE.tapes


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """n-dimensional array participating in differentiable computation."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise NotScalar(f"expected a scalar tensor, got shape {self.shape}")

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all broadcasting handled by add/mul
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return _reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _reduce(self, "mean", axis, keepdims)

    def abs(self):
        return absolute(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def _result(data, inputs, backward):
    """Wrap an op result; record on the active tape when gradients can flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = False
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape._records.append((out, inputs, backward))
    return out


class Tape:
    """Ordered record of differentiable operations (define-by-run).

    Use as a context manager around the forward pass, then call
    ``backward(loss)``.  Repeated backward calls accumulate into leaf
    gradients.  A tape is single-threaded; distinct threads get distinct
    tape stacks.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) for every requires_grad leaf on this tape."""
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise NotScalar("backward requires a scalar loss tensor")
        grads = {id(loss): np.ones_like(loss.data)}
        if loss._leaf and loss.requires_grad:
            g = grads[id(loss)]
            loss.grad = g.copy() if loss.grad is None else loss.grad + g
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for tensor, gin in zip(inputs, backward(g)):
                if gin is None or not tensor.requires_grad:
                    continue
                if tensor._leaf:
                    tensor.grad = gin if tensor.grad is None else tensor.grad + gin
                else:
                    key = id(tensor)
                    grads[key] = gin if key not in grads else grads[key] + gin


def _unbroadcast(grad, shape):
    """Sum a gradient over the axes that were expanded by broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64 if isinstance(x, float) else None))


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} + {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} * {b.shape}") from exc
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * b_data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a_data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def matmul(a, b):
    """Matrix product of two rank-2 tensors: (m, k) @ (k, n) -> (m, n)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data
    data = a_data @ b_data

    def backward(g):
        ga = g @ b_data.T if a.requires_grad else None
        gb = a_data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def absolute(x):
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return _result(np.abs(x.data), (x,), backward)


def sigmoid(x):
    data = _expit(x.data)

    def backward(g):
        return (g * data * (1.0 - data),)

    return _result(data, (x,), backward)


def softplus(x):
    # ln(1 + e^x) in the overflow-safe form max(x, 0) + log1p(e^{-|x|})
    d = x.data
    data = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = _expit(d)

    def backward(g):
        return (g * sig,)

    return _result(data, (x,), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), backward)


def _expit(t):
    """Numerically stable logistic 1 / (1 + e^{-t})."""
    out = np.empty_like(t, dtype=t.dtype if t.dtype == np.float64 else np.float32)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise InvalidAxis(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise InvalidAxis(f"duplicate axes in {axes}")
    return tuple(sorted(norm))


def _reduce(x, op, axis, keepdims):
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    fn = np.sum if op == "sum" else np.mean
    data = fn(x.data, axis=axes, keepdims=keepdims)
    in_shape = x.shape

    def backward(g):
        if not keepdims:
            hold = list(in_shape)
            for a in axes:
                hold[a] = 1
            g = g.reshape(hold)
        g = np.broadcast_to(g, in_shape)
        if op == "mean":
            g = g / count
        return (np.ascontiguousarray(g),)

    return _result(np.asarray(data), (x,), backward)


def concat(parts, axis=0):
    """Concatenate tensors along ``axis``; backward slices the gradient."""
    parts = list(parts)
    if not parts:
        raise ShapeMismatch("concat of zero tensors")
    axis = _normalize_axes(axis, parts[0].ndim)[0]
    for p in parts[1:]:
        if p.ndim != parts[0].ndim:
            raise ShapeMismatch("concat rank mismatch")
        for ax in range(p.ndim):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise ShapeMismatch(f"concat shapes {parts[0].shape} vs {p.shape} on axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return grads

    return _result(data, tuple(parts), backward)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis; backward scatters into zeros."""
    axis = _normalize_axes(axis, x.ndim)[0]
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeMismatch(f"narrow [{start}:{start + length}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    in_shape = x.shape

    def backward(g):
        out = np.zeros(in_shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _result(np.ascontiguousarray(x.data[index]), (x,), backward)


def reshape(x, shape):
    in_shape = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc

    def backward(g):
        return (g.reshape(in_shape),)

    return _result(data, (x,), backward)


def transpose(x, axes=None):
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def _im2col(xp, k, stride, out_h, out_w):
    """View the padded input as (B, C, k, k, out_h, out_w) patches, then copy."""
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, k, k, out_h, out_w),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b, c * k * k, out_h * out_w)


def conv2d(x, w, stride=1, padding=0):
    """2-D cross-correlation: x (B,C,H,W) with kernels w (O,C,k,k).

    Output spatial size is floor((H + 2*padding - k) / stride) + 1.
    Implemented as im2col + matmul; the backward pass folds the column
    gradient back with strided adds.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    b, c, h, wd = x.shape
    o, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise ShapeMismatch(f"kernel {w.shape} incompatible with input {x.shape}")
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeMismatch(f"kernel {k} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (wd + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, out_h, out_w)          # (B, C*k*k, P)
    w_mat = w.data.reshape(o, c * k * k)
    data = np.matmul(w_mat, cols).reshape(b, o, out_h, out_w)

    def backward(g):
        g_mat = g.reshape(b, o, out_h * out_w)
        gw = gx = None
        if w.requires_grad:
            gw = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, k, k)
        if x.requires_grad:
            gcols = np.matmul(w_mat.T, g_mat)            # (B, C*k*k, P)
            gcols = gcols.reshape(b, c, k, k, out_h, out_w)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki:ki + stride * out_h:stride, kj:kj + stride * out_w:stride] += gcols[:, :, ki, kj]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd]
            gx = np.ascontiguousarray(gx)
        return gx, gw

    return _result(data, (x, w), backward)


@dataclass
class BatchNormState:
    """Running mean/variance buffers, one value per channel."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self):
        return BatchNormState(self.mean.copy(), self.var.copy())


def batch_norm(x, gamma, beta, state, training, eps=1e-5, momentum=0.1):
    """Batch normalization over every axis except the channel axis (axis 1).

    Train mode normalizes by the biased batch statistics and updates the
    running buffers in ``state`` with ``momentum``; eval mode normalizes by
    the running buffers.  ``gamma``/``beta`` are per-channel vectors.
    """
    if x.ndim < 2:
        raise ShapeMismatch("batch_norm input must have a channel axis (rank >= 2)")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeMismatch(f"gamma/beta must be ({channels},)")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, channels) + (1,) * (x.ndim - 2)

    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        state.mean += momentum * (mu.reshape(channels) - state.mean)
        state.var += momentum * (var.reshape(channels) - state.var)
    else:
        mu = state.mean.reshape(shape).astype(x.dtype)
        var = state.var.reshape(shape).astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    g_col = gamma.data.reshape(shape)
    data = g_col * xhat + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            if training:
                g_mean = g.mean(axis=axes, keepdims=True)
                gx_hat_mean = (g * xhat).mean(axis=axes, keepdims=True)
                gx = (g_col * inv_std) * (g - g_mean - xhat * gx_hat_mean)
            else:
                gx = g * (g_col * inv_std)
            gx = np.ascontiguousarray(gx)
        return gx, ggamma, gbeta

    return _result(data, (x, gamma, beta), backward)


def grad_check(f, inputs, eps=1e-4, max_coords=None, rng=None):
    """Max relative error between tape gradients and central differences.

    ``f`` maps the given tensors to a scalar tensor and must be pure.  Every
    coordinate of every ``requires_grad`` input is perturbed by ``±eps``
    unless ``max_coords`` caps the coordinates per input (sampled with
    ``rng``).  The relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = f(*inputs)
        tape.backward(out)

    def value():
        return float(f(*inputs).data.reshape(()))

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        analytic = t.grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


# --- checkpoint serialization -------------------------------------------

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


def save_arrays(directory, arrays):
    """Write named arrays as manifest.json plus raw little-endian weights.bin."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    with open(directory / "weights.bin", "wb") as fh:
        for name, arr in arrays.items():
            dtype = "float64" if arr.dtype == np.float64 else "float32"
            fh.write(np.ascontiguousarray(arr).astype(_DTYPE_TAGS[dtype]).tobytes())
            manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_arrays(directory):
    """Read back a checkpoint directory written by ``save_arrays``."""
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    arrays = {}
    with open(directory / "weights.bin", "rb") as fh:
        blob = fh.read()
    offset = 0
    for entry in manifest:
        dtype = np.dtype(_DTYPE_TAGS[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(entry["dtype"]).copy()
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"weights.bin has {len(blob)} bytes, manifest expects {offset}")
    return arrays
