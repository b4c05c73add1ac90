"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` set appends a
node to the calling thread's tape. ``backward`` replays the tape in reverse
and then clears it, so each training step starts from an empty graph.
Threads that only run inference wrap their work in :func:`no_grad`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "DimensionError",
    "DomainError",
    "ContractError",
    "tensor",
    "no_grad",
    "is_recording",
    "reset_tape",
    "tape_size",
    "backward",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv2d",
    "max_pool2d",
    "activation",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "concat",
    "stack",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Shapes that cannot be combined by an operation."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class _Tape(threading.local):
    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True


_tape = _Tape()


@contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def is_recording() -> bool:
    return _tape.enabled


def reset_tape() -> None:
    _tape.nodes = []


def tape_size() -> int:
    return len(_tape.nodes)


class Tensor:
    """A float64 array that can take part in gradient accumulation."""

    __array_priority__ = 100.0
    __slots__ = ("data", "grad", "requires_grad", "detached", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.detached = False
        self._op = False  # True when produced by a recorded op

    # --- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._op

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor(self.data)
        out.detached = True
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # --- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return _add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -_wrap(other))

    def __rsub__(self, other):
        return _add(_wrap(other), -self)

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        if not other.requires_grad:
            return _mul(self, Tensor(1.0 / other.data))
        return _mul(self, other ** -1.0)

    def __rtruediv__(self, other):
        return _mul(_wrap(other), self ** -1.0)

    def __neg__(self):
        return _scale(self, -1.0)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        return _pow(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, index):
        return _getitem(self, index)

    # --- shape ops ------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return _transpose(self, axes)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _transpose(self, tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # --- reductions -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return _sum(self, axis, keepdims) * (1.0 / n)

    # --- elementwise sugar ---------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` and, when needed, push a tape node.

    ``backward(g)`` returns one gradient (or None) per input.
    """
    out = Tensor(out_data)
    if _tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = True
        _tape.nodes.append(_Node(tuple(inputs), out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class _Slice:
    """Gradient that is nonzero only at ``index`` of an array of ``shape``."""

    __slots__ = ("shape", "index", "g")

    def __init__(self, shape, index, g):
        self.shape, self.index, self.g = shape, index, g


def _basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis
               for p in parts)


def _scatter(full: np.ndarray, part: _Slice) -> None:
    if _basic_index(part.index):
        full[part.index] += part.g
    else:
        np.add.at(full, part.index, part.g)


class _GradSum:
    """Pending sum of dense and slice gradients for one tensor.

    Slice gradients are scattered once when the sum is read, so taking many
    slices of one tensor costs one full-size buffer instead of one per slice.
    """

    __slots__ = ("shape", "dense", "parts")

    def __init__(self, shape):
        self.shape, self.dense, self.parts = shape, None, []

    def add(self, g) -> "_GradSum":
        if isinstance(g, _Slice):
            self.parts.append(g)
        elif isinstance(g, _GradSum):
            if g.dense is not None:
                self.add(g.dense)
            self.parts.extend(g.parts)
        else:
            self.dense = g if self.dense is None else self.dense + g
        return self

    def value(self) -> np.ndarray:
        full = np.zeros(self.shape) if self.dense is None else np.array(self.dense, dtype=np.float64)
        for part in self.parts:
            _scatter(full, part)
        return full


def _dense(g):
    if isinstance(g, _GradSum):
        return g.value()
    if isinstance(g, _Slice):
        return _GradSum(g.shape).add(g).value()
    return g


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = _tape.nodes
    if not loss.requires_grad:
        if not retain_graph:
            reset_tape()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        g = _dense(g)
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad or t.detached:
                continue
            if t._op:
                key = id(t)
                prev = grads.get(key)
                if prev is None:
                    grads[key] = gi
                elif isinstance(prev, _GradSum):
                    prev.add(gi)
                else:
                    grads[key] = _GradSum(t.shape).add(prev).add(gi)
            else:
                gi = np.asarray(_dense(gi), dtype=np.float64)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    if not retain_graph:
        reset_tape()


Tensor.backward = lambda self, retain_graph=False: backward(self, retain_graph)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                              _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def _scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def _pow(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy's leading-batch semantics."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ≥2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul cannot batch {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]) if ad.ndim > 2 \
                    else ad.T @ g
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def _reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]
    shape = a.shape

    def bw(g):
        return (_Slice(shape, index, g),)

    return _record(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    expanded = [t.reshape(t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(out), (a,), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x·Φ(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _record(xd * cdf, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log of a non-positive value")
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid, "tanh": tanh,
                "exp": exp, "log": log}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(_wrap(x))


# ---------------------------------------------------------------------------
# normalisations
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1,
               eps: float = 1e-5) -> Tensor:
    """Normalise along one axis, then apply per-feature gain and bias."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    n = x.shape[axis]
    if n == 0:
        raise DimensionError("layer_norm over a zero-length axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"gain/bias shapes {gain.shape}/{bias.shape} do not match axis extent {n}")
    axis = axis % x.ndim
    bshape = [1] * x.ndim
    bshape[axis] = n
    gd, bd = gain.data.reshape(bshape), bias.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    red = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if bias.requires_grad:
            gb = g.sum(axis=red)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        return gx, gg, gb

    return _record(xhat * gd + bd, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Direct cross-correlation on ``[C,H,W]`` or ``[B,C,H,W]`` input."""
    x, kernels = _wrap(x), _wrap(kernels)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d shapes {x.shape} and {kernels.shape} unsupported")
    B, C, H, W = xd.shape
    O, Ck, kh, kw = kernels.shape
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    hn, wn = H + 2 * padding - kh, W + 2 * padding - kw
    if hn < 0 or wn < 0 or hn % stride or wn % stride:
        raise DimensionError(
            f"conv2d output size not integral for input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    Ho, Wo = hn // stride + 1, wn // stride + 1
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    kd = kernels.data

    if stride == kh == kw and padding == 0:
        # non-overlapping patches: a single reshape + matmul
        patches = xp.reshape(B, C, Ho, kh, Wo, kw).transpose(0, 2, 4, 1, 3, 5)
        patches = patches.reshape(B * Ho * Wo, C * kh * kw)
        out = (patches @ kd.reshape(O, -1).T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

        def bw_patch(g):
            if squeeze:
                g = g[None]
            gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
            gx = gk = None
            if kernels.requires_grad:
                gk = (gm.T @ patches).reshape(kd.shape)
            if x.requires_grad:
                gp = (gm @ kd.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
                gx = gp.transpose(0, 3, 1, 4, 2, 5).reshape(B, C, H, W)
                if squeeze:
                    gx = gx[0]
            return gx, gk
        bw = bw_patch
    else:
        from numpy.lib.stride_tricks import sliding_window_view
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # win: [B, C, Ho, Wo, kh, kw]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
        kmat = kd.reshape(O, -1)
        out = (cols @ kmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
        del cols

        def bw_general(g):
            if squeeze:
                g = g[None]
            gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
            gx = gk = None
            if kernels.requires_grad:
                c2 = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
                gk = (gm.T @ c2).reshape(kd.shape)
            if x.requires_grad:
                gc = (gm @ kmat).reshape(B, Ho, Wo, C, kh, kw)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                            gc[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                if padding:
                    gxp = gxp[:, :, padding:padding + H, padding:padding + W]
                gx = gxp[0] if squeeze else gxp
            return gx, gk
        bw = bw_general

    if squeeze:
        out = out[0]
    res = _record(np.ascontiguousarray(out), (x, kernels), bw)
    if bias is not None:
        bshape = (-1, 1, 1)
        res = res + _wrap(bias).reshape(bshape)
    return res


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first maximal entry."""
    x = _wrap(x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    B, C, H, W = xd.shape
    if H % size or W % size:
        raise DimensionError(f"max_pool2d size {size} does not divide {H}x{W}")
    Ho, Wo = H // size, W // size
    blocks = xd.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, Ho, Wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((B, C, Ho, Wo, size * size))
        np.put_along_axis(gb, arg[..., None], g.reshape(B, C, Ho, Wo)[..., None], axis=-1)
        gx = gb.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        gx = gx.reshape(B, C, H, W)
        return (gx[0] if squeeze else gx,)

    return _record(out[0] if squeeze else out, (x,), bw)


def where_mask(x: Tensor, allowed: np.ndarray, fill: float = -1e30) -> Tensor:
    """Replace entries outside ``allowed`` by a constant (no gradient there)."""
    keep = np.broadcast_to(allowed, x.shape)
    out = np.where(keep, x.data, fill)
    return _record(out, (x,), lambda g: (g * keep,))


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    return float(np.sqrt(total))
