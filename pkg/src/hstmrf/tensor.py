"""Dense tensor with tape-based reverse-mode automatic differentiation.

Every differentiable primitive used by the model lives here.  A primitive
computes its forward value with numpy and, when any input requires a
gradient, records a :class:`Node` holding a backward closure.  Nodes carry a
monotonically increasing sequence number, so the recorded graph doubles as
an execution-ordered tape: :func:`backward` replays the reachable nodes in
reverse sequence order.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
import math
import threading
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf from its inputs."""

    def __init__(self, op: str):
        super().__init__(f"operation '{op}' produced non-finite values")
        self.op = op


class GraphError(RuntimeError):
    """Raised for invalid backward calls (non-scalar loss, detached graph)."""


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.grad_enabled = True
        self.check_finite = True
        self.tapes: list = []


_state = _State()
_seq = itertools.count()


def get_default_dtype():
    return _state.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the float width used for new tensors."""
    old = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    old = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = old


class Node:
    """One recorded operation: its inputs and the rule mapping the output
    gradient to input gradients."""

    __slots__ = ("seq", "op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node(seq={self.seq}, op={self.op!r})"


class Tape:
    """Context manager exposing the operations recorded while it is active.

    Recording happens regardless of whether a Tape is open; the tape only
    gives a handle on the ordered record, which is useful for inspection.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """An N-dimensional float array with an optional gradient."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            # float arrays keep their precision; lists and scalars take the default
            keep = isinstance(data, np.ndarray) and arr.dtype.type in (np.float32, np.float64)
            dtype = arr.dtype.type if keep else _state.dtype
        self.data: np.ndarray = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # ----------------------------------------------------------- basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -------------------------------------------------------- operators
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state.dtype), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_state.dtype), requires_grad)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype.type if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _state.dtype))


def _record(op: str, data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    if _state.check_finite and not np.isfinite(data).all():
        raise NonFiniteError(op)
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype.type)
    if needs:
        node = Node(op, parents, backward_fn)
        out._node = node
        for tape in _state.tapes:
            tape.nodes.append(node)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------------------------------------------------- backward
def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> list[Node]:
    """Populate ``.grad`` on every leaf that requires it.

    Returns the nodes in the order they were visited (reverse execution
    order); each reachable node appears exactly once.
    """
    if grad is None and loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad: the graph is detached")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    if loss._node is None:
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return []

    # collect reachable (node, output tensor) pairs
    owners: dict[int, Tensor] = {}
    stack = [loss]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        owners[id(node)] = t
        for p in node.parents:
            if p.requires_grad and p._node is not None:
                stack.append(p)
    order = sorted((t._node for t in owners.values()), key=lambda n: n.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in order:
        out = owners[id(node)]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"'{node.op}' backward produced {pg.shape} for input {p.shape}")
            if p._node is None:
                p.grad = pg.astype(p.dtype, copy=True) if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    return order


# ---------------------------------------------------------- elementwise
def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", out, (a, b), bw)


def scale(a: Tensor, factor: float) -> Tensor:
    return _record("scale", a.data * a.dtype.type(factor), (a,), lambda g: (g * factor,))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def elementwise(kind: str, a, b) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``div`` or ``scale``."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind == "scale":
        return scale(_as_tensor(a), float(b))
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return ops[kind](a, b)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    # out-of-domain inputs surface as NonFiniteError("log") rather than a numpy warning
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _record("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


# -------------------------------------------------------------- reductions
def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axes, keepdims), 1.0 / count)


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis)
        return (ga,)

    return _record("amax", out if keepdims else np.squeeze(out, axis), (a,), bw)


# ------------------------------------------------------------ shape ops
def reshape(a: Tensor, shape) -> Tensor:
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index], copy=True)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _record("getitem", out, (a,), bw)


def roll(a: Tensor, shifts, axes) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    return _record("roll", np.roll(a.data, shifts, axes), (a,),
                   lambda g: (np.roll(g, tuple(-s for s in shifts), axes),))


# ---------------------------------------------------------------- matmul
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching over leading dimensions."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", out, (a, b), bw)


# ------------------------------------------------------------ convolution
def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, Cin, H, W) with ``w`` (Cout, Cin, k, k).

    Implemented by gathering the k*k shifted (strided, dilated) views into a
    column matrix and multiplying by the flattened kernel.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if kh < 1 or kh != kw:
        raise ShapeError(f"conv2d needs a square kernel with k >= 1, got {w.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"invalid conv2d geometry stride={stride} dilation={dilation} padding={padding}")
    k = kh
    ho = conv_output_size(h, k, stride, dilation, padding)
    wo = conv_output_size(wd, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} is not positive for input {x.shape}, "
                         f"k={k}, stride={stride}, dilation={dilation}, padding={padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    taps = [(i * dilation, j * dilation) for i in range(k) for j in range(k)]
    cols = np.stack([xp[:, :, r:r + span_h:stride, c:c + span_w:stride] for r, c in taps], axis=2)
    cols = cols.reshape(n, cin * k * k, ho * wo)
    w2 = w.data.reshape(cout, cin * k * k)
    out = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, cin, k * k, ho, wo)
            gxp = np.zeros_like(xp)
            for t, (r, c) in enumerate(taps):
                gxp[:, :, r:r + span_h:stride, c:c + span_w:stride] += dcols[:, :, t]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _record("conv2d", out, parents, bw)


# ------------------------------------------------------- softmax family
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), bw)


def softpool(x: Tensor, axis: int = -1) -> Tensor:
    """Exponentially weighted mean along ``axis``: sum(e^a * a) / sum(e^a)."""
    if x.shape[axis] == 0:
        raise ShapeError("softpool over an empty region")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    wts = e / e.sum(axis=axis, keepdims=True)
    pooled = (wts * x.data).sum(axis=axis, keepdims=True)

    def bw(g):
        g = np.expand_dims(g, axis)
        return (g * wts * (1.0 + x.data - pooled),)

    return _record("softpool", np.squeeze(pooled, axis), (x,), bw)


def softpool2d(x: Tensor, size: int) -> Tensor:
    """SoftPool over non-overlapping ``size``x``size`` regions of (N, C, H, W)."""
    n, c, h, w = x.shape
    if size < 1 or h % size or w % size:
        raise ShapeError(f"softpool2d region {size} does not tile spatial size {h}x{w}")
    t = reshape(x, (n, c, h // size, size, w // size, size))
    t = transpose(t, (0, 1, 2, 4, 3, 5))
    t = reshape(t, (n, c, h // size, w // size, size * size))
    return softpool(t, axis=-1)


def global_softpool(x: Tensor) -> Tensor:
    """Per-channel SoftPool over all spatial positions: (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    return softpool(reshape(x, (n, c, h * w)), axis=-1)


# ----------------------------------------------------------- activations
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _record("gelu", out, (x,), bw)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------- normalization
def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, like the common convention).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d over {c} channels got affine params {gamma.shape}, {beta.shape}")
    count = n * h * w
    if count == 0:
        raise ShapeError("batch_norm2d on an empty batch")
    shape = (1, c, 1, 1)
    gm = gamma.data.reshape(shape)
    if training:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        with np.errstate(divide="ignore", invalid="ignore"):
            unbiased = var.reshape(c) * (count / max(count - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(shape).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(shape)) * inv
    out = gm * xhat + beta.data.reshape(shape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gm
            if training:
                gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            else:
                gx = gxhat * inv
        return gx, ggamma, gbeta

    return _record("batch_norm2d", out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm over width {x.shape[-1]} got affine params {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _record("layer_norm", out, (x, gamma, beta), bw)


# ------------------------------------------------------------ resampling
def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centers (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes to ``size`` (align_corners=False)."""
    ho, wo = size
    if ho < 1 or wo < 1:
        raise ShapeError(f"resize target {size} is smaller than 1x1")
    h, w = x.shape[-2:]
    if (h, w) == (ho, wo):
        return x
    mh = bilinear_matrix(h, ho, x.dtype)
    mw = bilinear_matrix(w, wo, x.dtype)
    out = mh @ x.data @ mw.T
    return _record("resize_bilinear", out, (x,), lambda g: (mh.T @ g @ mw,))


def upsample2x(x: Tensor) -> Tensor:
    return resize_bilinear(x, (x.shape[-2] * 2, x.shape[-1] * 2))


# ------------------------------------------------------------------ loss
def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, computed stably.

    ``target`` is a constant array; no gradient flows to it.
    """
    x = logits.data
    t = np.asarray(target, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"bce_with_logits: logits {x.shape} vs target {t.shape}")
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _record("bce_with_logits", out, (logits,), lambda g: (g * (special.expit(x) - t),))
