"""Dense tensors with reverse-mode automatic differentiation.

Every operation in this module returns a new :class:`Tensor` that remembers
its parents and a closure computing the parents' adjoints.  Calling
:func:`backward` on a scalar loss orders the graph into a :class:`Tape` and
replays the closures in reverse.

Only the operations the attention-MIL network needs are provided; broadcasting
is limited to what :func:`add` and :func:`mul` get from numpy.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, GeometryError

BCE_EPS = 1e-7

_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    ``data`` is a numpy array; integer input is promoted to float64.  ``grad``
    stays ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.array(data, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward_fn: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = backward_fn if out.requires_grad else None
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return sum_all(self)


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording backward closures."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Operations reachable from a root tensor, in execution order.

    The order is a depth-first topological sort, so reversing it visits every
    recorded operation once, after all of its consumers.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def replay(self, seed_grad: np.ndarray) -> None:
        pending: dict[int, np.ndarray] = {id(self.root): seed_grad}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every tensor that ``loss`` depends on.

    Gradients accumulate into any existing ``grad``; clear them first when
    reusing parameters across steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    tape.replay(np.ones_like(loss.data))
    return tape


# ----------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor, axis: int = 0) -> Tensor:
    """Arithmetic mean along ``axis`` (the axis is removed)."""
    n = a.shape[axis]
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return Tensor._result(a.data.mean(axis=axis), (a,), bw, "mean")


def reduce_max(a: Tensor, axis: int = 0) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def bw(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return Tensor._result(out, (a,), bw, "max")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), bw, "matmul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return Tensor._result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def softmax(a: Tensor) -> Tensor:
    """Softmax of a vector, shifted by its maximum."""
    if a.data.ndim != 1 or a.data.size < 1:
        raise DimensionError(f"softmax expects a non-empty vector, got shape {a.shape}")
    e = np.exp(a.data - a.data.max())
    out = e / e.sum()

    def bw(g):
        return (out * (g - np.dot(g, out)),)

    return Tensor._result(out, (a,), bw, "softmax")


def bce_loss(p: Tensor, y: float) -> Tensor:
    """Binary cross-entropy of a probability against a 0/1 label.

    ``p`` is clamped to ``[BCE_EPS, 1 - BCE_EPS]``; the clamp passes no
    gradient when active.
    """
    y = float(y)
    raw = p.data.reshape(())
    q = np.clip(raw, BCE_EPS, 1 - BCE_EPS)
    inside = BCE_EPS <= raw <= 1 - BCE_EPS
    loss = -(y * np.log(q) + (1 - y) * np.log1p(-q))

    def bw(g):
        if not inside:
            return (np.zeros(p.shape, dtype=p.dtype),)
        d = -(y / q) + (1 - y) / (1 - q)
        return (np.asarray(g * d, dtype=p.dtype).reshape(p.shape),)

    return Tensor._result(np.asarray(loss, dtype=p.dtype), (p,), bw, "bce")


# ----------------------------------------------------------------------------
# convolution and pooling


def _conv_out(extent: int, k: int, stride: int, what: str) -> int:
    span = extent - k
    if span < 0 or span % stride:
        raise GeometryError(f"{what}: extent {extent} with kernel {k} and stride {stride} is not integral")
    return span // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation plus a per-channel bias.

    ``x`` is ``C×H×W`` or batched ``N×C×H×W``; ``kernels`` is
    ``C_out×C_in×k×k`` and ``bias`` has length ``C_out``.
    """
    if stride < 1:
        raise GeometryError(f"stride must be positive, got {stride}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be C×H×W or N×C×H×W, got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernels.shape
    if ci != c or kh != kw:
        raise DimensionError(f"conv2d kernels {kernels.shape} do not match input {x.shape}")
    if bias.shape != (co,):
        raise DimensionError(f"conv2d bias {bias.shape} does not match {co} output channels")
    ho = _conv_out(h, kh, stride, "conv2d height")
    wo = _conv_out(w, kw, stride, "conv2d width")

    windows = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, kernels.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g4 = g if batched else g[None]
        gk = np.tensordot(g4, windows, axes=([0, 2, 3], [0, 2, 3]))
        gb = g4.sum(axis=(0, 2, 3))
        gcols = np.tensordot(g4, kernels.data, axes=([1], [0]))  # n, ho, wo, c, k, k
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return (gx if batched else gx[0]), gk, gb

    return Tensor._result(out if batched else out[0], (x, kernels, bias), bw, "conv2d")


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping ``window``×``window`` max pooling over the last two axes.

    Gradient flows to the first row-major maximum of each window.
    """
    if window < 1:
        raise GeometryError(f"pool window must be positive, got {window}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"maxpool2d input must be C×H×W or N×C×H×W, got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if h % window or w % window:
        raise GeometryError(f"maxpool2d: {h}×{w} is not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = xd.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        g4 = g if batched else g[None]
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g4[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return ((gx if batched else gx[0]),)

    return Tensor._result(out if batched else out[0], (x,), bw, "maxpool2d")


# ----------------------------------------------------------------------------
# finite differences


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``max_i |analytic_i - numeric_i| / max(1, |analytic_i|)``.  ``x``
    is left unchanged.
    """
    probe = Tensor(x.data, requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = np.zeros_like(x.data) if probe.grad is None else probe.grad
    numeric = numeric_gradient(lambda arr: f(Tensor(arr)).item(), x.data, step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    base = np.array(x, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(base)
        flat[i] = orig - step
        fm = f(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
