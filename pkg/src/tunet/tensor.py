"""Dense tensors with reverse-mode automatic differentiation.

Every operation computes its result eagerly with numpy and appends a backward
rule to the active tape. backward() replays the tape in exact reverse
execution order, accumulating gradients into the .grad slot of every
requires_grad leaf, then clears the tape.

The tape is thread-local: independent threads record and replay independent
tapes. Parameter tensors must be owned by a single training loop during a
step; read-only inference (under no_grad) is safe to run concurrently.

Element type is float32 by default; switch to float64 (default_dtype context
or set_default_dtype) for gradient verification.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

from tunet import kernels
from tunet.errors import ContractError, NumericError, ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_default_dtype = np.dtype(np.float32)
_debug_checks = False


def set_default_dtype(dtype):
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ContractError(f"element type must be float32 or float64, got {dt}")
    _default_dtype = dt


def get_default_dtype():
    return _default_dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the default element type (64-bit verification mode)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug_checks(enabled):
    """When on, every op output is checked for NaN/Inf and fails fast."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tape:
    """Execution-ordered record of ops; backward walks it in reverse."""

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries = []

    def __len__(self):
        return len(self._entries)

    def clear(self):
        self._entries.clear()


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.recording = True
    return _state


def active_tape():
    return _tls().tape


@contextmanager
def no_grad():
    """Disable tape recording (inference / numeric probing)."""
    st = _tls()
    prev = st.recording
    st.recording = False
    try:
        yield
    finally:
        st.recording = prev


def is_recording():
    return _tls().recording


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        dt = np.dtype(dtype) if dtype is not None else _default_dtype
        if dt not in _FLOAT_DTYPES:
            raise ContractError(f"element type must be float32 or float64, got {dt}")
        arr = np.asarray(data, dtype=dt)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: would promote 0-d to 1-d
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

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
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        return out

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _make(data, inputs, opname):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = is_recording() and any(t.requires_grad for t in inputs)
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in output of {opname}")
    return out


def _record(out, inputs, backward):
    if out.requires_grad:
        _tls().tape._entries.append((out, inputs, backward))


def backward(loss):
    """Populate .grad on every requires_grad leaf reachable from loss.

    loss must be a scalar (shape ()); the tape is cleared afterwards.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if len(tape) == 0:
        raise ContractError("backward on an empty tape")
    entries = tape._entries
    produced = {id(e[0]) for e in entries}
    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    for out, inputs, rule in reversed(entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gt in zip(inputs, rule(g)):
            if gt is None or not t.requires_grad:
                continue
            if id(t) in produced:
                acc = grads.get(id(t))
                grads[id(t)] = gt if acc is None else acc + gt
            else:
                t.grad = gt.copy() if t.grad is None else t.grad + gt
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, opname, fwd, bwd_a, bwd_b):
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None
    out = _make(data, (a, b), opname)

    def rule(g):
        ga = _unbroadcast(bwd_a(g), a.shape) if a.requires_grad else None
        gb = _unbroadcast(bwd_b(g), b.shape) if b.requires_grad else None
        return ga, gb

    _record(out, (a, b), rule)
    return out


def add(a, b):
    return _binary(a, b, "add", lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, "sub", lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a, b):
    return _binary(
        a, b, "mul", lambda x, y: x * y, lambda g: g * b.data, lambda g: g * a.data
    )


def div(a, b):
    return _binary(
        a,
        b,
        "div",
        lambda x, y: x / y,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def scale(x, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    out = _make(x.data * c, (x,), "scale")
    _record(out, (x,), lambda g: (g * c,))
    return out


def neg(x):
    return scale(x, -1.0)


def log(x):
    out = _make(np.log(x.data), (x,), "log")
    _record(out, (x,), lambda g: (g / x.data,))
    return out


def relu(x):
    out = _make(np.maximum(x.data, 0), (x,), "relu")
    _record(out, (x,), lambda g: (g * (x.data > 0),))
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Smooth unit used in the transformer MLP (tanh form)."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd**3))
    out = _make(0.5 * xd * (1.0 + t), (x,), "gelu")

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    _record(out, (x,), rule)
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    out = _make(data, (x,), "reshape")
    _record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def transpose(x, axes=None):
    data = np.transpose(x.data, axes)
    out = _make(data, (x,), "transpose")
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    _record(out, (x,), lambda g: (np.transpose(g, inv),))
    return out


def concat_channels(tensors):
    """Concatenate along axis 0 (the channel axis of C,H,W feature maps)."""
    if not tensors:
        raise ContractError("concat_channels needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=0)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat_channels: mismatched trailing extents {shapes}") from None
    out = _make(data, tuple(tensors), "concat_channels")
    sizes = [t.shape[0] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=0))

    _record(out, tuple(tensors), rule)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)
    out = _make(np.asarray(data), (x,), "sum")

    def rule(g):
        if axis is None:
            return (np.full(x.shape, g, dtype=x.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    _record(out, (x,), rule)
    return out


def tmean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product; stacked inputs (equal leading extents) multiply per slice."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul needs equal-rank inputs of rank >= 2, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = _make(a.data @ b.data, (a, b), "matmul")

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    _record(out, (a, b), rule)
    return out


def linear(x, w, bias=None):
    """x @ w + bias, bias broadcast over rows."""
    y = matmul(x, w)
    if bias is not None:
        y = add(y, bias)
    return y


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(x, axis=-1):
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (x,), "softmax")

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    _record(out, (x,), rule)
    return out


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    out = _make(data, (x,), "log_softmax")
    p = np.exp(data)

    def rule(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    _record(out, (x,), rule)
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _norm_backward(g, xhat, inv_std, axes):
    """Shared backward for per-group standardization y = (x - mu) / std."""
    m = g - g.mean(axis=axes, keepdims=True) - xhat * (g * xhat).mean(axis=axes, keepdims=True)
    return m * inv_std


def layer_norm(x, gain, bias, eps=1e-5):
    """Standardize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x.data - mu) * inv_std
    out = _make(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = _norm_backward(g * gain.data, xhat, inv_std, -1) if x.requires_grad else None
        return gx, gg, gb

    _record(out, (x, gain, bias), rule)
    return out


def group_norm(x, num_groups, gain, bias, eps=1e-5):
    """Per-group standardization of a (C, H, W) map with per-channel affine."""
    if x.ndim != 3:
        raise ShapeError(f"group_norm expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if c == 0 or num_groups <= 0 or c % num_groups != 0:
        raise ShapeError(f"channels {c} not divisible into {num_groups} groups")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"group_norm affine params must have shape ({c},)")
    xg = x.data.reshape(num_groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat_g = (xg - mu) * inv_std
    xhat = xhat_g.reshape(c, h, w)
    out = _make(
        xhat * gain.data[:, None, None] + bias.data[:, None, None],
        (x, gain, bias),
        "group_norm",
    )

    def rule(g):
        gg = (g * xhat).sum(axis=(1, 2)) if gain.requires_grad else None
        gb = g.sum(axis=(1, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = (g * gain.data[:, None, None]).reshape(num_groups, -1)
            gx = _norm_backward(gxhat, xhat_g, inv_std, 1).reshape(c, h, w)
        return gx, gg, gb

    _record(out, (x, gain, bias), rule)
    return out


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlate a (C_in, H, W) map with (C_out, C_in, k, k) filters."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) x (O,C,k,k), got {x.shape} x {w.shape}")
    c_out, c_in, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {w.shape}")
    if c_in != x.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    _, h, wd = x.shape
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError(
            f"kernel {k}x{k} larger than padded input {h + 2 * padding}x{wd + 2 * padding}"
        )
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    cols = kernels.im2col(np.ascontiguousarray(x.data), k, stride, padding)
    w2 = w.data.reshape(c_out, -1)
    out = _make((w2 @ cols).reshape(c_out, ho, wo), (x, w), "conv2d")

    def rule(g):
        g2 = np.ascontiguousarray(g.reshape(c_out, -1))
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray(w2.T @ g2)
            gx = kernels.col2im(dcols, x.shape[0], h, wd, k, stride, padding)
        return gx, gw

    _record(out, (x, w), rule)
    return out


def bilinear_upsample(x, scale_factor=None, size=None):
    """Resample a (C, H, W) map up to 2x-per-step or an explicit target size."""
    if x.ndim != 3:
        raise ShapeError(f"bilinear_upsample expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if h == 0 or w == 0 or c == 0:
        raise ShapeError(f"bilinear_upsample on zero-sized input {x.shape}")
    if (scale_factor is None) == (size is None):
        raise ContractError("pass exactly one of scale_factor or size")
    if scale_factor is not None:
        oh, ow = h * int(scale_factor), w * int(scale_factor)
    else:
        oh, ow = int(size[0]), int(size[1])
    if oh < h or ow < w:
        raise ShapeError(f"target {oh}x{ow} smaller than source {h}x{w}")
    data = kernels.upsample_bilinear(np.ascontiguousarray(x.data), oh, ow)
    out = _make(data, (x,), "bilinear_upsample")

    def rule(g):
        return (kernels.upsample_bilinear_grad(np.ascontiguousarray(g), h, w),)

    _record(out, (x,), rule)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class SGD:
    """Momentum SGD with weight decay folded into the gradient:

        v <- momentum * v + (g + weight_decay * p)
        p <- p - lr * v
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise ContractError("sgd step with a missing gradient")
            if p.grad.shape != p.data.shape:
                raise ContractError(
                    f"gradient shape {p.grad.shape} does not match parameter {p.data.shape}"
                )
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v
