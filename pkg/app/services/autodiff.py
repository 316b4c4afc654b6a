"""Reverse-mode automatic differentiation over float64 numpy arrays.

Ops are recorded eagerly (define-by-run): every ``Tensor`` remembers the op
that produced it and its parents, and ``backward`` walks that tape in reverse
topological order. A ``Graph`` is a named, re-runnable program over tensors;
``evaluate`` and ``grad_check`` work on it.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from app.errors import GraphError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
GRADCHECK_EPS = 1e-5

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[BackwardFn] = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def square(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, "square", (x,), lambda g: (2.0 * g * x.data,))


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, "sqrt", (x,), lambda g: (0.5 * g / out,))


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def softplus(x: ArrayLike) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    sig = expit(x.data)
    return _make(out, "softplus", (x,), lambda g: (g * sig,))


def clamp(x: ArrayLike, low: float, high: float) -> Tensor:
    """Clip to [low, high]; gradient is zero outside the bounds."""
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)
    return _make(np.clip(x.data, low, high), "clamp", (x,), lambda g: (g * inside,))


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), _back)


# ---------------------------------------------------------------------------
# Reductions and shape plumbing
# ---------------------------------------------------------------------------

def sum(x: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), _back)


def mean(x: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}")
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: ArrayLike, key) -> Tensor:
    x = as_tensor(x)

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in parts)

    def _back(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(x.data[key], "getitem", (x,), _back)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]} on axis {axis}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", parts, _back)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def pointwise(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """Channel mixing on axis 0: x (Din, ...) -> (Dout, ...). A 1x1 convolution on maps."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"pointwise: weight {weight.shape} does not match input {x.shape}")
    out = np.tensordot(weight.data, x.data, axes=([1], [0]))
    parents: Tuple[Tensor, ...] = (x, weight)
    b = None
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (weight.shape[0],):
            raise ShapeError(f"pointwise: bias {b.shape} does not match weight {weight.shape}")
        out = out + b.data.reshape((-1,) + (1,) * (x.data.ndim - 1))
        parents = parents + (b,)
    trailing = tuple(range(1, x.data.ndim))

    def _back(g):
        gx = np.tensordot(weight.data, g, axes=([0], [0]))
        gw = np.tensordot(g, x.data, axes=(trailing, trailing))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=trailing)

    return _make(out, "pointwise", parents, _back)


def conv1x1(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    return pointwise(x, weight, bias)


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, H, W) of zero-padded 3x3 neighbourhoods."""
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, h, w), dtype=DTYPE)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, k] = padded[:, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, h, w)


def _col2im3(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    cols = cols.reshape(c, 9, h, w)
    padded = np.zeros((c, h + 2, w + 2), dtype=DTYPE)
    for k in range(9):
        dy, dx = divmod(k, 3)
        padded[:, dy:dy + h, dx:dx + w] += cols[:, k]
    return padded[:, 1:h + 1, 1:w + 1]


def conv3x3(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """'Same' 3x3 convolution with zero padding. weight: (Dout, Din, 3, 3)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4 or weight.shape[1:] != (x.shape[0], 3, 3):
        raise ShapeError(f"conv3x3: weight {weight.shape} does not match input {x.shape}")
    c, h, w = x.shape
    cols = _im2col3(x.data)
    wmat = weight.data.reshape(weight.shape[0], -1)
    out = np.tensordot(wmat, cols, axes=([1], [0]))
    parents: Tuple[Tensor, ...] = (x, weight)
    b = None
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (weight.shape[0],):
            raise ShapeError(f"conv3x3: bias {b.shape} does not match weight {weight.shape}")
        out = out + b.data[:, None, None]
        parents = parents + (b,)

    def _back(g):
        gcols = np.tensordot(wmat, g, axes=([0], [0]))
        gx = _col2im3(gcols, c, h, w)
        gw = np.tensordot(g, cols, axes=([1, 2], [1, 2])).reshape(weight.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _make(out, "conv3x3", parents, _back)


# ---------------------------------------------------------------------------
# Bilinear sampling
# ---------------------------------------------------------------------------

def _gather(m: np.ndarray, xi: np.ndarray, yi: np.ndarray):
    _, h, w = m.shape
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    xc = np.clip(xi, 0, w - 1)
    yc = np.clip(yi, 0, h - 1)
    return m[:, yc, xc] * valid, valid, yc * w + xc


def bilinear_sample(map_: ArrayLike, xs: ArrayLike, ys: ArrayLike) -> Tensor:
    """Sample a (D, H, W) map at continuous points -> (D, N).

    x indexes columns and y rows. Neighbours outside the grid read as zero.
    Differentiable in the map and in both coordinate arrays.
    """
    map_, xs, ys = as_tensor(map_), as_tensor(xs), as_tensor(ys)
    if map_.data.ndim != 3:
        raise ShapeError(f"bilinear_sample: map must be (D, H, W), got {map_.shape}")
    if xs.shape != ys.shape or xs.data.ndim != 1:
        raise ShapeError(f"bilinear_sample: coordinates {xs.shape} and {ys.shape} must be equal 1-D")
    d, h, w = map_.shape
    x, y = xs.data, ys.data
    x0f, y0f = np.floor(x), np.floor(y)
    fx, fy = x - x0f, y - y0f
    x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
    x1, y1 = x0 + 1, y0 + 1
    corners = {
        "00": _gather(map_.data, x0, y0),
        "01": _gather(map_.data, x1, y0),
        "10": _gather(map_.data, x0, y1),
        "11": _gather(map_.data, x1, y1),
    }
    weights = {
        "00": (1 - fy) * (1 - fx),
        "01": (1 - fy) * fx,
        "10": fy * (1 - fx),
        "11": fy * fx,
    }
    out = np.zeros((d, x.size), dtype=DTYPE)
    for name, (vals, _, _) in corners.items():
        out += weights[name] * vals

    def _back(g):
        gmap = np.zeros((d, h * w), dtype=DTYPE)
        for name, (_, valid, flat) in corners.items():
            np.add.at(gmap, (slice(None), flat), g * (weights[name] * valid))
        v00, v01, v10, v11 = (corners[k][0] for k in ("00", "01", "10", "11"))
        gx = (g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10))).sum(axis=0)
        gy = (g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01))).sum(axis=0)
        return gmap.reshape(d, h, w), gx, gy

    return _make(out, "bilinear_sample", (map_, xs, ys), _back)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> List[Tensor]:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Returns the visited nodes in the order they were processed.
    """
    if not root.requires_grad:
        raise GraphError("backward: output does not depend on any tensor requiring grad")
    if grad is None:
        if root.size != 1:
            raise GraphError(f"backward: implicit gradient needs a scalar output, got {root.shape}")
        grad = np.ones(root.shape, dtype=DTYPE)
    order = topological_order(root)
    pending: Dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=DTYPE)}
    visited: List[Tensor] = []
    for node in reversed(order):
        g = pending.pop(id(node), None)
        visited.append(node)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return visited


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    op: str
    inputs: Tuple[int, ...]
    output: int


@dataclass(frozen=True)
class Graph:
    """A re-runnable differentiable program: named input arrays to named output tensors."""

    build: Callable[[Mapping[str, Tensor]], Mapping[str, Tensor]]
    inputs: Tuple[str, ...]
    name: str = "graph"

    def run(self, bindings: Mapping[str, np.ndarray], requires_grad: Iterable[str] = ()) -> Dict[str, Tensor]:
        missing = [n for n in self.inputs if n not in bindings]
        if missing:
            raise GraphError(f"{self.name}: unbound inputs {missing}")
        wanted = set(requires_grad)
        leaves = {n: Tensor(np.array(bindings[n], dtype=DTYPE), requires_grad=n in wanted) for n in self.inputs}
        return dict(self.build(leaves))


def evaluate(graph: Graph, bindings: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Run ``graph`` forward; returns fresh arrays per output name."""
    outputs = graph.run(bindings)
    for name, t in outputs.items():
        if not np.all(np.isfinite(t.data)):
            raise GraphError(f"{graph.name}: output {name!r} is not finite")
    return {name: t.numpy() for name, t in outputs.items()}


def trace(graph: Graph, bindings: Mapping[str, np.ndarray], output: Optional[str] = None) -> List[Node]:
    """Topologically ordered nodes behind one output, all inputs treated as differentiable."""
    outputs = graph.run(bindings, requires_grad=graph.inputs)
    root = outputs[output] if output else next(iter(outputs.values()))
    order = topological_order(root)
    ids = {id(t): i for i, t in enumerate(order)}
    return [Node(t.op, tuple(ids[id(p)] for p in t.parents if id(p) in ids), ids[id(t)]) for t in order]


def _scalar_backward(graph: Graph, bindings: Mapping[str, np.ndarray], output: Optional[str],
                     wrt: Tuple[str, ...]) -> Tuple[str, float, Dict[str, np.ndarray]]:
    missing = [n for n in graph.inputs if n not in bindings]
    if missing:
        raise GraphError(f"{graph.name}: unbound inputs {missing}")
    leaves = {n: Tensor(np.array(bindings[n], dtype=DTYPE), requires_grad=n in wrt) for n in graph.inputs}
    outputs = dict(graph.build(leaves))
    name = output or next(iter(outputs))
    root = outputs[name]
    if root.size != 1:
        raise GraphError(f"{graph.name}: output {name!r} has shape {root.shape}, expected a scalar")
    if root.requires_grad:
        backward(root)
    grads = {n: leaves[n].grad if leaves[n].grad is not None else np.zeros_like(leaves[n].data) for n in wrt}
    return name, float(root.data.reshape(())), grads


def gradients(graph: Graph, bindings: Mapping[str, np.ndarray], output: Optional[str] = None,
              wrt: Optional[Sequence[str]] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Scalar output value and its gradient with respect to each input in ``wrt``."""
    _, value, grads = _scalar_backward(graph, bindings, output, tuple(wrt or graph.inputs))
    return value, grads


def grad_check(
    graph: Graph,
    bindings: Mapping[str, np.ndarray],
    eps: float = GRADCHECK_EPS,
    output: Optional[str] = None,
    wrt: Optional[Sequence[str]] = None,
) -> float:
    """Worst relative error between backward-pass and central-difference gradients.

    The denominator is max(|analytic|, |numeric|, 1e-8) per element.
    """
    if not 0 < eps <= 1e-3:
        raise GraphError(f"grad_check: eps must be in (0, 1e-3], got {eps}")
    wrt = tuple(wrt or graph.inputs)
    name, _, analytic = _scalar_backward(graph, bindings, output, wrt)

    def f(values: Mapping[str, np.ndarray]) -> float:
        return float(graph.run(values)[name].data.reshape(()))

    worst = 0.0
    shifted = {n: np.array(bindings[n], dtype=DTYPE) for n in graph.inputs}
    for n in wrt:
        flat = shifted[n].reshape(-1)
        aflat = analytic[n].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(shifted)
            flat[i] = orig - eps
            lo = f(shifted)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    logger.debug("grad_check %s: worst relative error %.3e", graph.name, worst)
    return worst
