"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op's backward rule is written in terms of other ops, so gradients are
themselves differentiable when ``grad(..., create_graph=True)`` is used. That
is what lets a probe update ``beta - alpha * grad(loss, beta)`` carry a
dependence on the network parameters that produced ``loss``.

Broadcasting is limited to scalar-with-tensor. Anything else is a
``ShapeError``; use ``expand`` / ``sum`` explicitly.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "UnreachableError",
    "tensor",
    "no_grad",
    "grad",
    "add",
    "sub",
    "mul",
    "divide",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "expand",
    "take",
    "put",
    "relu",
    "sigmoid",
    "square",
    "sqrt",
    "l2_norm",
    "dot",
    "softmax",
    "softmax_cross_entropy",
    "binary_log_loss",
    "conv2d",
    "conv2d_weight_grad",
    "flip_kernel",
    "avg_pool2",
    "unpool2",
    "spatial_sum",
    "spatial_expand",
    "cosine_similarity",
    "grad_reverse",
    "finite_difference_gradient",
]


class ShapeError(ValueError):
    pass


class UnreachableError(RuntimeError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _active_graphs() -> list:
    graphs = getattr(_state, "graphs", None)
    if graphs is None:
        graphs = _state.graphs = []
    return graphs


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- graph record


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]


@dataclass
class Graph:
    """Ordered record of the ops executed while the graph is active.

    Use as a context manager. ``replay`` re-executes the recorded forward
    functions, optionally substituting new values for leaf inputs.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _active_graphs().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_graphs().remove(self)

    def replay(self, feed: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node; ``feed`` maps ``id(tensor)`` to a replacement value."""
        values: dict[int, np.ndarray] = dict(feed or {})
        outs = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            out = node.forward(*args)
            values[id(node.output)] = out
            outs.append(out)
        return outs


def _record(kind, forward, inputs, out):
    for g in _active_graphs():
        g.nodes.append(Node(kind, tuple(inputs), out, forward))


def _apply(kind: str, forward, inputs: Sequence[Tensor], backward) -> Tensor:
    """Run ``forward`` on input arrays and wire the result into the graph.

    ``backward(g, out, need)`` returns one gradient Tensor (or None) per input.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(forward(*[t.data for t in inputs]), dtype=np.float64)
    out.name = None
    out.op = kind
    track = _grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    if track:
        out._parents = tuple(inputs)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    _record(kind, forward, inputs, out)
    return out


def _check_same(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: Tensor, like: Tensor) -> Tensor:
    """Undo scalar broadcasting in a gradient."""
    if g.shape == like.shape:
        return g
    return reshape(sum(g), like.shape)


# ------------------------------------------------------------ elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)

    def backward(g, out, need):
        return (_reduce_to(g, a) if need[0] else None, _reduce_to(g, b) if need[1] else None)

    return _apply("add", np.add, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)

    def backward(g, out, need):
        return (_reduce_to(g, a) if need[0] else None, _reduce_to(neg(g), b) if need[1] else None)

    return _apply("sub", np.subtract, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)

    def backward(g, out, need):
        return (
            _reduce_to(mul(g, b), a) if need[0] else None,
            _reduce_to(mul(g, a), b) if need[1] else None,
        )

    return _apply("mul", np.multiply, (a, b), backward)


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("divide", a, b)

    def backward(g, out, need):
        ga = _reduce_to(divide(g, b), a) if need[0] else None
        gb = _reduce_to(neg(mul(g, divide(out, b))), b) if need[1] else None
        return ga, gb

    return _apply("divide", np.divide, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)

    def backward(g, out, need):
        return (scale(g, c),)

    return _apply("scale", lambda v: v * c, (x,), backward)


def neg(x) -> Tensor:
    return scale(x, -1.0)


def relu(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g, out, need):
        # derivative is piecewise constant: the mask is a constant, not a graph node
        return (mul(g, Tensor((x.data > 0).astype(np.float64))),)

    return _apply("relu", lambda v: np.maximum(v, 0.0), (x,), backward)


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g, out, need):
        return (mul(g, mul(out, sub(1.0, out))),)

    return _apply("sigmoid", _sigmoid_np, (x,), backward)


def square(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g, out, need):
        return (mul(g, scale(x, 2.0)),)

    return _apply("square", np.square, (x,), backward)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g, out, need):
        return (divide(g, scale(out, 2.0)),)

    return _apply("sqrt", np.sqrt, (x,), backward)


# ------------------------------------------------------------ shape ops


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        rest = int(np.prod([s for s in shape if s != -1], dtype=np.int64))
        if rest and x.size % rest == 0:
            shape = tuple(x.size // rest if s == -1 else s for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size or any(s < 0 for s in shape):
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    orig = x.shape

    def backward(g, out, need):
        return (reshape(g, orig),)

    return _apply("reshape", lambda v: v.reshape(shape), (x,), backward)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {x.shape}")

    def backward(g, out, need):
        return (transpose(g),)

    return _apply("transpose", lambda v: np.ascontiguousarray(v.T), (x,), backward)


def _norm_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def sum(x, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    shape = x.shape

    def backward(g, out, need):
        return (expand(g, shape, axes),)

    return _apply("sum", lambda v: np.sum(v, axis=axes), (x,), backward)


def expand(x, shape, axes) -> Tensor:
    """Insert ``axes`` into ``x`` and broadcast to ``shape``; inverse of ``sum``."""
    x = _as_tensor(x)
    shape = tuple(shape)
    axes = _norm_axes(axes, len(shape))
    kept = tuple(s for i, s in enumerate(shape) if i not in axes)
    if kept != x.shape:
        raise ShapeError(f"expand: input {x.shape} incompatible with target {shape} over axes {axes}")

    def fwd(v):
        return np.broadcast_to(np.expand_dims(v, axes), shape).copy()

    def backward(g, out, need):
        return (sum(g, axes),)

    return _apply("expand", fwd, (x,), backward)


def mean(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=np.int64)) if axes else 1
    shape = x.shape

    def backward(g, out, need):
        return (scale(expand(g, shape, axes), 1.0 / count),)

    return _apply("mean", lambda v: np.mean(v, axis=axes), (x,), backward)


def take(x, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``take(w, (slice(None), 3))``."""
    x = _as_tensor(x)
    shape = x.shape

    def backward(g, out, need):
        return (put(g, shape, key),)

    return _apply("take", lambda v: np.array(v[key]), (x,), backward)


def put(x, shape, key) -> Tensor:
    """Zeros of ``shape`` with ``x`` written at ``key``; adjoint of ``take``."""
    x = _as_tensor(x)
    shape = tuple(shape)

    def fwd(v):
        out = np.zeros(shape)
        out[key] = v
        return out

    def backward(g, out, need):
        return (take(g, key),)

    return _apply("put", fwd, (x,), backward)


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def backward(g, out, need):
        return (
            matmul(g, transpose(b)) if need[0] else None,
            matmul(transpose(a), g) if need[1] else None,
        )

    return _apply("matmul", np.matmul, (a, b), backward)


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal-length vectors, got {a.shape} and {b.shape}")

    def backward(g, out, need):
        return (mul(g, b) if need[0] else None, mul(g, a) if need[1] else None)

    return _apply("dot", lambda u, v: np.asarray(np.dot(u, v)), (a, b), backward)


def l2_norm(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g, out, need):
        return (mul(divide(g, out), x),)

    return _apply("l2_norm", lambda v: np.asarray(np.sqrt(np.sum(v * v))), (x,), backward)


def cosine_similarity(a, b, eps: float = 1e-12) -> Tensor:
    """``a.b / ((|a| + eps)(|b| + eps))`` for vectors ``a``, ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shape mismatch {a.shape} vs {b.shape}")
    denom = mul(add(l2_norm(a), eps), add(l2_norm(b), eps))
    return divide(dot(a, b), denom)


def grad_reverse(x, lam: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam``."""
    x = _as_tensor(x)
    lam = float(lam)

    def backward(g, out, need):
        return (scale(g, -lam),)

    return _apply("grad_reverse", lambda v: v.copy(), (x,), backward)


# ------------------------------------------------------------ losses


def _softmax_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(x) -> Tensor:
    """Row-wise softmax of a B x N matrix."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax: expected B x N, got {x.shape}")

    def backward(g, out, need):
        gs = mul(g, out)
        return (sub(gs, mul(out, expand(sum(gs, 1), out.shape, 1))),)

    return _apply("softmax", _softmax_np, (x,), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of B x N ``logits`` against integer ``labels``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n_rows, n_cls = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ShapeError(f"softmax_cross_entropy: label out of range for {n_cls} classes")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(n_rows), labels] = 1.0

    def fwd(v):
        m = v.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(v - m).sum(axis=1))
        return np.asarray(np.mean(lse - v[np.arange(n_rows), labels]))

    def backward(g, out, need):
        diff = sub(softmax(logits), Tensor(onehot))
        return (mul(scale(g, 1.0 / n_rows), diff),)

    return _apply("softmax_cross_entropy", fwd, (logits,), backward)


def binary_log_loss(logits, targets, weights=None) -> Tensor:
    """Weighted binary log-loss ``sum w * (softplus(z) - t z)`` of raw logits.

    ``weights`` defaults to ``1/n`` everywhere, i.e. the plain mean.
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    w = np.full(logits.shape, 1.0 / max(logits.size, 1)) if weights is None else np.asarray(weights, np.float64)
    if t.shape != logits.shape or w.shape != logits.shape:
        raise ShapeError(f"binary_log_loss: logits {logits.shape}, targets {t.shape}, weights {w.shape}")

    def fwd(v):
        softplus = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
        return np.asarray(np.sum(w * (softplus - t * v)))

    def backward(g, out, need):
        return (mul(g, mul(Tensor(w), sub(sigmoid(logits), Tensor(t)))),)

    return _apply("binary_log_loss", fwd, (logits,), backward)


# ------------------------------------------------------------ convolution


def _conv_geometry(kind, x_shape, w_shape, pad):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f"{kind}: expected NCHW input and OIHW kernel, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[1]:
        raise ShapeError(f"{kind}: input channels {x_shape} do not match kernel {w_shape}")
    kh, kw = w_shape[2], w_shape[3]
    if kh != kw or not 0 <= pad <= kh - 1:
        raise ShapeError(f"{kind}: kernel {w_shape} with padding {pad} unsupported")
    ho, wo = x_shape[2] + 2 * pad - kh + 1, x_shape[3] + 2 * pad - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"{kind}: kernel {w_shape} larger than padded input {x_shape}")
    return kh, ho, wo


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B C Ho Wo k k
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def _conv_np(x, w, pad, cols=None):
    k, ho, wo = _conv_geometry("conv2d", x.shape, w.shape, pad)
    if cols is None:
        cols = _im2col(x, k, pad)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2).copy()


def conv2d(x, w, pad: int | None = None) -> Tensor:
    """Stride-1 cross-correlation, NCHW input, OIHW kernel, symmetric zero padding.

    ``pad`` defaults to ``(k - 1) // 2`` ("same" for odd kernels).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if pad is None:
        pad = (w.shape[2] - 1) // 2 if w.ndim == 4 else 0
    k, _, _ = _conv_geometry("conv2d", x.shape, w.shape, pad)
    cache: dict[str, np.ndarray] = {}

    def fwd(xv, wv):
        cols = _im2col(xv, k, pad)
        if xv is x.data:
            cache["cols"] = cols
        return _conv_np(xv, wv, pad, cols)

    def backward(g, out, need):
        gx = conv2d(g, flip_kernel(w), k - 1 - pad) if need[0] else None
        gw = conv2d_weight_grad(x, g, k, pad, cols=cache.get("cols")) if need[1] else None
        return gx, gw

    return _apply("conv2d", fwd, (x, w), backward)


def conv2d_weight_grad(x, g, k: int, pad: int, cols: np.ndarray | None = None) -> Tensor:
    """Kernel gradient of ``conv2d(x, w, pad)`` given upstream gradient ``g``."""
    x, g = _as_tensor(x), _as_tensor(g)
    if x.ndim != 4 or g.ndim != 4 or x.shape[0] != g.shape[0]:
        raise ShapeError(f"conv2d_weight_grad: shape mismatch {x.shape} vs {g.shape}")

    def fwd(xv, gv):
        c = cols if (cols is not None and xv is x.data) else _im2col(xv, k, pad)
        o = gv.shape[1]
        g2 = gv.transpose(0, 2, 3, 1).reshape(-1, o)
        return (g2.T @ c).reshape(o, xv.shape[1], k, k)

    def backward(gw, out, need):
        gx = conv2d(g, flip_kernel(gw), k - 1 - pad) if need[0] else None
        gg = conv2d(x, gw, pad) if need[1] else None
        return gx, gg

    return _apply("conv2d_weight_grad", fwd, (x, g), backward)


def flip_kernel(w) -> Tensor:
    """OIHW -> IOHW with both spatial axes reversed (an involution)."""
    w = _as_tensor(w)
    if w.ndim != 4:
        raise ShapeError(f"flip_kernel: expected OIHW, got {w.shape}")

    def backward(g, out, need):
        return (flip_kernel(g),)

    return _apply("flip_kernel", lambda v: np.ascontiguousarray(v[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)), (w,), backward)


def avg_pool2(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avg_pool2: expected NCHW with even H, W, got {x.shape}")

    def fwd(v):
        b, c, h, w = v.shape
        return v.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g, out, need):
        return (unpool2(g),)

    return _apply("avg_pool2", fwd, (x,), backward)


def unpool2(x) -> Tensor:
    """Adjoint of ``avg_pool2``: each cell spread as value/4 over a 2x2 block."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"unpool2: expected NCHW, got {x.shape}")

    def fwd(v):
        return np.repeat(np.repeat(v, 2, axis=2), 2, axis=3) * 0.25

    def backward(g, out, need):
        return (avg_pool2(g),)

    return _apply("unpool2", fwd, (x,), backward)


def spatial_sum(x) -> Tensor:
    """B x C x H x W -> B x C, summing over spatial cells."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"spatial_sum: expected NCHW, got {x.shape}")
    return sum(x, (2, 3))


def spatial_expand(x, h: int, w: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"spatial_expand: expected B x C, got {x.shape}")
    return expand(x, x.shape + (h, w), (2, 3))


# ------------------------------------------------------------ differentiation


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    loss: Tensor,
    wrt: Iterable[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the returned tensors are graph nodes and can be
    differentiated again. A ``wrt`` tensor that ``loss`` does not depend on
    raises ``UnreachableError`` unless ``allow_unused`` is set, in which case
    zeros are returned for it.
    """
    wrt = list(wrt)
    if loss.size != 1:
        raise ShapeError(f"grad: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss) if loss.requires_grad else []
    reach = {id(t) for t in order}
    missing = [i for i, t in enumerate(wrt) if id(t) not in reach]
    if missing and not allow_unused:
        names = [wrt[i].name or f"#{i}" for i in missing]
        raise UnreachableError(f"grad: loss does not depend on {names}")

    keep = {id(t) for t in wrt}
    ctx = _nullcontext() if create_graph else no_grad()
    with ctx:
        grads: dict[int, Tensor] = {id(loss): Tensor(np.ones(loss.shape))}
        for node in reversed(order):
            if node._backward is None:
                continue
            g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
            if g is None:
                continue
            need = tuple(p.requires_grad for p in node._parents)
            for p, gp in zip(node._parents, node._backward(g, node, need)):
                if gp is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else add(prev, gp)
        out = []
        for t in wrt:
            g = grads.get(id(t))
            if g is None:
                g = Tensor(np.zeros(t.shape))
            out.append(g)
    return out


@contextmanager
def _nullcontext():
    yield


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (array or Tensor)."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    view = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(base.copy()))
        flat[i] = old - h
        fm = float(f(base.copy()))
        flat[i] = old
        view[i] = (fp - fm) / (2.0 * h)
    return out
