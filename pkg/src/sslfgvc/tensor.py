"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a numpy array. Every differentiable op appends a node to the
graph with a monotonically increasing sequence number; ``backward`` walks the
nodes reachable from the loss in exact reverse creation order and
accumulates gradients additively into the leaves.

The scalar type is a build-wide switch (``set_default_dtype`` /
``default_dtype``): float32 for training, float64 for oracle checks.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Parameter",
    "set_default_dtype",
    "get_default_dtype",
    "default_dtype",
    "no_grad",
    "backward",
    "grad_check",
    "elementwise",
    "reduction",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "relu",
    "tanh",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "square",
    "abs_",
    "matmul",
    "conv2d",
    "sum_",
    "mean",
    "max_",
    "softmax",
    "log_softmax",
    "logsumexp",
    "global_avg_pool",
    "max_pool2",
    "avg_pool",
    "reshape",
    "transpose",
    "concat",
    "l2_normalize",
]


class NonFiniteError(ArithmeticError):
    """Raised when a forward op produces NaN or infinity from its inputs."""


_state = threading.local()
_DTYPE = np.float32
_seq = itertools.count()


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation passes)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """An n-dimensional array that may take part in a gradient graph."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = -1
        self._op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Parameter(Tensor):
    """A named trainable leaf with its own momentum buffer."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._seq = next(_seq)
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero denominator")
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    return _result(a.data * a.data.dtype.type(factor), (a,), lambda g: (g * factor,), "scale")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)
    return _result(out, (a,), lambda g: (g * (out > 0),), "relu")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1 + np.tanh(0.5 * x))
    return _result(out, (a,), lambda g: (g * sig,), "softplus")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


_UNARY = {"relu": relu, "tanh": tanh, "exp": exp, "log": log, "neg": neg,
          "sigmoid": sigmoid, "softplus": softplus, "square": square, "abs": abs_}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name. ``scale`` takes a float as ``b``."""
    if op_kind == "scale":
        return scale(a, b)
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# linear algebra / convolution
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is ``C×H×W`` or ``B×C×H×W``; ``weight`` is ``C_out×C_in×kh×kw``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding nonnegative")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: bad ranks {x.shape}, {weight.shape}")
    B, C, H, W = xd.shape
    Co, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {Ci}")
    num_h, num_w = H + 2 * padding - kh, W + 2 * padding - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ValueError(f"conv2d: non-integral output size for input {H}x{W}, kernel {kh}x{kw}, "
                         f"stride {stride}, padding {padding}")
    Ho, Wo = num_h // stride + 1, num_w // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    K = C * kh * kw
    if kh == kw == 1 and stride == 1:
        cols = xp.reshape(B, C, Ho * Wo)
    else:
        cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
        cols = cols.reshape(B, K, Ho * Wo)
    wmat = weight.data.reshape(Co, K)
    out = np.matmul(wmat, cols)
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data[:, None]
    out = out.reshape(B, Co, Ho, Wo)
    if unbatched:
        out = out[0]

    def _backward(g):
        g3 = (g[None] if unbatched else g).reshape(B, Co, Ho * Wo)
        dw = None
        if weight.requires_grad:
            dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3)
            if kh == kw == 1 and stride == 1:
                dxp = dcols.reshape(xp.shape)
            else:
                dcols = dcols.reshape(B, C, kh, kw, Ho, Wo)
                dxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
            if unbatched:
                dx = dx[0]
        if bias is None:
            return dx, dw
        return dx, dw, g3.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, _backward, "conv2d")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"invalid axis {ax} for rank {ndim}")
    axes = tuple(sorted(ax % ndim for ax in axes))
    return axes[0] if isinstance(axis, int) else axes


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _result(out, (x,), lambda g: (_expand(g, x.shape, axis, keepdims).copy(),), "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    n = x.size // max(out.size, 1)
    return _result(out, (x,), lambda g: (_expand(g, x.shape, axis, keepdims) / n,), "mean")


def max_(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    x = _as_tensor(x)
    if axis is None:
        flat = x.data.reshape(-1)
        idx = int(np.argmax(flat))

        def _backward_all(g):
            d = np.zeros(flat.shape, dtype=g.dtype)
            d[idx] = g.reshape(-1)[0]
            return (d.reshape(x.shape),)

        out = np.asarray(flat[idx]).reshape((1,) * x.ndim if keepdims else ())
        return _result(out, (x,), _backward_all, "max")
    axis = _norm_axis(axis, x.ndim)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def _backward(g):
        d = np.zeros(x.shape, dtype=g.dtype)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(d, np.expand_dims(idx, axis), gk, axis)
        return (d,)

    return _result(out, (x,), _backward, "max")


def logsumexp(x, axis: int = -1, keepdims: bool = False, where=None) -> Tensor:
    """log Σ exp(x) along ``axis``, optionally restricted to a boolean mask.

    Entries outside ``where`` are excluded and receive zero gradient.
    """
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    xd = x.data
    if where is not None:
        where = np.broadcast_to(np.asarray(where, dtype=bool), x.shape)
        if not where.any(axis=axis).all():
            raise ValueError("logsumexp: empty selection")
        xd = np.where(where, xd, -np.inf)
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s
    if not keepdims:
        out = np.squeeze(out, axis)

    def _backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * p,)

    return _result(out, (x,), _backward, "logsumexp")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    p = z / z.sum(axis=axis, keepdims=True)
    return _result(p, (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),), "softmax")


def global_avg_pool(x) -> Tensor:
    """Spatial mean over the last two axes: ``(B,)C×H×W → (B,)C``."""
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise ValueError(f"global_avg_pool expects a 3-D or 4-D tensor, got {x.shape}")
    return mean(x, axis=(-2, -1))


def max_pool2(x) -> Tensor:
    """2×2 max pooling with stride 2; ties route the gradient to the first cell
    of the window in row-major order."""
    x = _as_tensor(x)
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2 needs even spatial dims, got {H}x{W}")
    quads = [x.data[..., 0::2, 0::2], x.data[..., 0::2, 1::2], x.data[..., 1::2, 0::2], x.data[..., 1::2, 1::2]]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def _backward(g):
        d = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for q, (r, c) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q == out) & ~taken
            taken |= hit
            d[..., r::2, c::2] = g * hit
        return (d,)

    return _result(out, (x,), _backward, "max_pool2")


def avg_pool(x, out_hw: tuple[int, int]) -> Tensor:
    """Adaptive average pooling to ``out_hw`` when it evenly divides the input."""
    x = _as_tensor(x)
    H, W = x.shape[-2:]
    oh, ow = out_hw
    if oh < 1 or ow < 1 or H % oh or W % ow:
        raise ValueError(f"avg_pool: {H}x{W} is not divisible into {oh}x{ow}")
    lead = x.shape[:-2]
    bh, bw = H // oh, W // ow
    out = x.data.reshape(*lead, oh, bh, ow, bw).mean(axis=(-3, -1))

    def _backward(g):
        d = np.broadcast_to(g[..., :, None, :, None] / (bh * bw), (*lead, oh, bh, ow, bw))
        return (d.reshape(x.shape),)

    return _result(out, (x,), _backward, "avg_pool")


def reduction(op_kind: str, x, axis=None) -> Tensor:
    """Dispatch a reduction by name."""
    if op_kind == "sum":
        return sum_(x, axis)
    if op_kind == "mean":
        return mean(x, axis)
    if op_kind == "max":
        return max_(x, axis)
    if op_kind == "softmax":
        return softmax(x, -1 if axis is None else axis)
    if op_kind == "log_softmax":
        return log_softmax(x, -1 if axis is None else axis)
    if op_kind == "global_avg_pool":
        return global_avg_pool(x)
    if op_kind == "max_pool2":
        return max_pool2(x)
    raise ValueError(f"unknown reduction {op_kind!r}")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def _backward(g):
        d = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(d, index, g)
        return (d,)

    return _result(np.array(out, copy=True), (x,), _backward, "getitem")


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero vector has no direction")
    y = x.data / norm
    return _result(y, (x,), lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,),
                   "l2_normalize")


# ---------------------------------------------------------------------------
# backward pass and gradient oracle
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    # leaves (seq -1) are processed after every op node
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    Runs in float64. The per-coordinate error is
    ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with default_dtype(np.float64):
        base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        leaf = Tensor(base.copy(), requires_grad=True)
        out = f(leaf)
        if out.size != 1:
            raise ValueError("grad_check: f must be scalar-valued")
        backward(out)
        analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(Tensor(base.copy())).item()
                flat[i] = orig - eps
                fm = f(Tensor(base.copy())).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("grad_check: non-finite function value")
                num_flat[i] = (fp - fm) / (2 * eps)
        err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
        return float(err.max()) if err.size else 0.0
