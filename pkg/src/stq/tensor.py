"""Dense tensors with tape-based reverse-mode autodiff.

Every operation returns a new immutable :class:`Tensor`.  When taping is
enabled (the default) the result remembers its parents and a closure that
maps the upstream gradient to gradients of the parents.  :func:`backward`
walks the recorded graph in reverse topological order.

Data is float32 unless the caller hands in float64 arrays, which are kept
as-is so gradient checks can run at double precision.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_taping",
    "backward",
    "custom_grad",
    "forward_op",
]

_TAPING = True


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's shape rule."""


@contextlib.contextmanager
def no_grad():
    global _TAPING
    prev = _TAPING
    _TAPING = False
    try:
        yield
    finally:
        _TAPING = prev


def is_taping() -> bool:
    return _TAPING


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "taped", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data).view()
        self.data.setflags(write=False)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.taped = _TAPING
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    # -- operator sugar ------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _TAPING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a, b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def _sign_right(x: np.ndarray) -> np.ndarray:
    # subgradient convention: sign(0) = +1
    return np.where(x >= 0, 1, -1).astype(x.dtype)


def abs_(a) -> Tensor:
    a = _wrap(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * _sign_right(a.data),), "abs")


def maximum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("maximum", a, b)
    take_a = a.data >= b.data  # ties go to the first argument

    def bw(g):
        return (
            _unbroadcast(np.where(take_a, g, 0).astype(g.dtype), a.shape),
            _unbroadcast(np.where(take_a, 0, g).astype(g.dtype), b.shape),
        )

    return _result(np.where(take_a, a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("minimum", a, b)
    take_a = a.data <= b.data

    def bw(g):
        return (
            _unbroadcast(np.where(take_a, g, 0).astype(g.dtype), a.shape),
            _unbroadcast(np.where(take_a, 0, g).astype(g.dtype), b.shape),
        )

    return _result(np.where(take_a, a.data, b.data), (a, b), bw, "minimum")


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data >= 0  # relu(x) = max(x, 0); the tie at 0 takes the x branch
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-d tensor, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions do not match, {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``x`` (N, C, H, W) with ``w`` (K, C, kh, kw)."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {cw}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(k, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, k).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, k)
        gw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), bw, "conv2d")


def maxpool2d(x, kernel: int = 2, stride: int | None = None) -> Tensor:
    x = _wrap(x)
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError(f"maxpool2d: window {kernel} larger than input {x.shape[2:]}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros(x.shape, dtype=x.dtype)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.where(arg == idx, g, 0)
        return (dx,)

    return _result(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, C) or (N, C, H, W) input.

    In training mode the running statistics arrays are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm: expected 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: affine parameters must have shape ({c},), got {gamma.shape}, {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    dt = x.dtype
    if training:
        m = x.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(dt), running_var.astype(dt)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.size // c
            gx = (
                inv.reshape(bshape)
                / m
                * (m * gxhat - gxhat.sum(axis=axes, keepdims=True) - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx.astype(dt), ggamma.astype(dt), gbeta.astype(dt)

    return _result(out.astype(dt), (x, gamma, beta), bw, "batchnorm")


def log_softmax(x) -> Tensor:
    x = _wrap(x)
    if x.ndim != 2:
        raise ShapeError(f"log_softmax: expected (N, classes), got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def nll(logp, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under log-probabilities."""
    logp = _wrap(logp)
    labels = np.asarray(labels, dtype=np.int64)
    if logp.ndim != 2 or labels.shape != (logp.shape[0],):
        raise ShapeError(f"nll: log-probabilities {logp.shape} do not match labels {labels.shape}")
    n = logp.shape[0]
    rows = np.arange(n)
    out = -logp.data[rows, labels].sum() / n

    def bw(g):
        d = np.zeros_like(logp.data)
        d[rows, labels] = -g / n
        return (d,)

    return _result(np.asarray(out, dtype=logp.dtype), (logp,), bw, "nll")


def cross_entropy(logits, labels) -> Tensor:
    return nll(log_softmax(logits), labels)


# ---------------------------------------------------------------------------
# custom gradients
# ---------------------------------------------------------------------------


def custom_grad(forward: Callable[..., np.ndarray], backward: Callable[..., tuple]) -> Callable[..., Tensor]:
    """Build a differentiable op whose gradient is ``backward``, verbatim.

    ``forward(*arrays)`` computes the output array.  ``backward(upstream,
    *arrays)`` must return one gradient per input, each with that input's
    shape (``None`` for inputs that receive no gradient).
    """

    def op(*inputs) -> Tensor:
        tensors = tuple(_wrap(t) for t in inputs)
        arrays = tuple(t.data for t in tensors)
        out = np.asarray(forward(*arrays))
        if out.dtype != np.float64:
            out = out.astype(np.float32)

        def bw(g):
            grads = backward(g, *arrays)
            if not isinstance(grads, tuple):
                grads = (grads,)
            if len(grads) != len(tensors):
                raise ShapeError(f"custom_grad: backward returned {len(grads)} gradients for {len(tensors)} inputs")
            fixed = []
            for t, gr in zip(tensors, grads):
                if gr is None:
                    fixed.append(None)
                    continue
                gr = np.asarray(gr, dtype=t.dtype)
                if gr.shape != t.shape:
                    raise ShapeError(f"custom_grad: gradient shape {gr.shape} does not match input shape {t.shape}")
                fixed.append(gr)
            return tuple(fixed)

        return _result(out, tensors, bw, "custom_grad")

    return op


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, leaves: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``root`` with respect to trainable leaf tensors.

    Returns a mapping leaf -> gradient array.  Every tensor in ``leaves``
    appears in the result (zeros if ``root`` does not depend on it); with
    ``leaves=None`` the map covers the trainable leaves reachable from
    ``root``.  Each leaf's ``.grad`` is overwritten with its gradient.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.taped:
        raise ValueError("backward: root was produced with taping disabled")

    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    found: dict[int, Tensor] = {}
    if root.requires_grad:
        for node in reversed(_topo_order(root)):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if node.requires_grad:
                    found[id(node)] = node
                    grads[id(node)] = g if g is not None else np.zeros(node.shape, dtype=node.dtype)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    targets = list(leaves) if leaves is not None else list(found.values())
    result: dict[Tensor, np.ndarray] = {}
    for leaf in targets:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.dtype)
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g
        result[leaf] = g
    return result


_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "abs": abs_,
    "max": maximum,
    "min": minimum,
    "relu": relu,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast": broadcast_to,
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "batchnorm": batchnorm,
    "log_softmax": log_softmax,
    "nll": nll,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch an operation by name, e.g. ``forward_op("conv2d", x, w, stride=1)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **attrs)
