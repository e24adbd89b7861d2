"""Float64 tensors with tape-based reverse-mode differentiation.

Every primitive records a node on the active :class:`Graph` when at least one
operand requires gradients. Vector-Jacobian products are themselves written in
terms of tensor primitives, so ``grad(..., create_graph=True)`` yields
differentiable gradients (needed for the Lyapunov projection, which
differentiates through the gradient of V).
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Node:
    __slots__ = ("seq", "op", "parents", "vjp")

    def __init__(self, seq: int, op: str, parents: tuple, vjp: Callable):
        self.seq = seq
        self.op = op
        self.parents = parents
        self.vjp = vjp

    def __repr__(self):
        return f"Node({self.seq}, {self.op!r})"


class Graph:
    """Ordered record of executed primitives plus a seedable RNG."""

    def __init__(self, seed: int | None = None):
        self.records: list[Node] = []
        self._counter = itertools.count()
        self.rng = np.random.default_rng(seed)

    def record(self, op: str, parents: tuple, vjp: Callable) -> Node:
        node = Node(next(self._counter), op, parents, vjp)
        self.records.append(node)
        return node

    def clear(self) -> None:
        # ordering counter keeps increasing so nodes alive across a clear still sort correctly
        self.records.clear()

    def __len__(self):
        return len(self.records)


_graph = Graph()
_grad_enabled = True
check_finite = True


def get_graph() -> Graph:
    return _graph


@contextlib.contextmanager
def use_graph(graph: Graph):
    global _graph
    prev, _graph = _graph, graph
    try:
        yield graph
    finally:
        _graph = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, True
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        self._node: Node | None = None
        self.name = name

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
    def T(self) -> "Tensor":
        return transpose(self)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{tag})"

    def __len__(self):
        return len(self.data)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple, vjp: Callable) -> Tensor:
    if check_finite and not np.all(np.isfinite(data)):
        finite_in = all(np.all(np.isfinite(p.data)) for p in parents)
        if finite_in:
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _graph.record(op, parents, vjp)
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    return sum_to(g, shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(mul(g, -1.0), b.shape)

    return _result(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")

    def vjp(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(mul(g, div(mul(a, -1.0), mul(b, b))), b.shape)
        return ga, gb

    return _result(a.data / b.data, "div", (a, b), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, "square", (a,), lambda g: (mul(g, mul(a, 2.0)),))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _result(
        np.power(a.data, p), "power", (a,), lambda g: (mul(g, mul(power(a, p - 1.0), p)),)
    )


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient 0 at the kink
    mask = (a.data > 0).astype(np.float64)
    return _result(a.data * mask, "relu", (a,), lambda g: (mul(g, mask),))


def smooth_relu(a, d: float) -> Tensor:
    """C1 rectifier: 0 for x<=0, x^2/(2d) on (0, d), x - d/2 beyond."""
    if not d > 0:
        raise ValueError(f"smooth_relu needs d > 0, got {d}")
    a = as_tensor(a)
    x = a.data
    out = np.where(x <= 0, 0.0, np.where(x < d, x * x / (2 * d), x - d / 2))
    return _result(out, "smooth_relu", (a,), lambda g: (mul(g, smooth_relu_grad(a, d)),))


def smooth_relu_grad(a, d: float) -> Tensor:
    """Derivative of :func:`smooth_relu`, i.e. clip(x/d, 0, 1)."""
    a = as_tensor(a)
    x = a.data
    mask = ((x > 0) & (x < d)).astype(np.float64) / d
    return _result(np.clip(x / d, 0.0, 1.0), "smooth_relu_grad", (a,), lambda g: (mul(g, mask),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (mul(g, exp(a)),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), "log", (a,), lambda g: (div(g, a),))


def where(mask, a, b) -> Tensor:
    """Select elementwise by a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    mf = m.astype(np.float64)

    def vjp(g):
        return _unbroadcast(mul(g, mf), a.shape), _unbroadcast(mul(g, 1.0 - mf), b.shape)

    return _result(np.where(m, a.data, b.data), "where", (a, b), vjp)


# ---------------------------------------------------------------------------
# shape & linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.T, "transpose", (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (reshape(g, old),))


def take(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        return (scatter(g, index, shape),)

    return _result(a.data[index], "take", (a,), vjp)


def scatter(g, index, shape) -> Tensor:
    g = as_tensor(g)
    out = np.zeros(shape)
    np.add.at(out, index, g.data)
    return _result(out, "scatter", (g,), lambda u: (take(u, index),))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(np.empty(g.shape), axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _result(
        np.broadcast_to(a.data, shape).copy(), "broadcast", (a,), lambda g: (sum_to(g, src),)
    )


def sum_to(a, shape) -> Tensor:
    """Sum a broadcast result back down to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    out = np.sum(a.data, axis=axes, keepdims=True) if axes else a.data
    out = out.reshape(shape)
    full = a.shape
    return _result(out, "sum_to", (a,), lambda g: (broadcast_to(g, full),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ValueError("mean of an empty tensor")
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def sum_squares(a, axis=None, keepdims=False) -> Tensor:
    """Squared L2 norm, optionally along one axis."""
    return sum_(square(a), axis, keepdims)


def max_abs(a) -> Tensor:
    a = as_tensor(a)
    flat = np.abs(a.data).ravel()
    i = int(np.argmax(flat))
    sgn = np.sign(a.data.ravel()[i])
    shape = a.shape

    def vjp(g):
        e = np.zeros(int(np.prod(shape)) if shape else 1)
        e[i] = sgn
        return (mul(g, e.reshape(shape)),)

    return _result(np.asarray(flat[i]), "max_abs", (a,), vjp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    The returned node supports first-order gradients only.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return _result(np.asarray(loss), "softmax_xent", (logits,), lambda g: (mul(g, dlogits),))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _toposort(roots: Iterable[Tensor], stop: set[int]) -> list[Tensor]:
    """Tensors with nodes reachable from ``roots``, latest node first."""
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [t for t in roots if t._node is not None]
    while stack:
        t = stack.pop()
        if id(t) in seen or id(t) in stop:
            continue
        seen.add(id(t))
        out.append(t)
        for p in t._node.parents:
            if p._node is not None and p.requires_grad and id(p) not in seen:
                stack.append(p)
    out.sort(key=lambda t: t._node.seq, reverse=True)
    return out


def _run_backward(outputs, seeds, targets, create_graph, retain_graph, accumulate):
    stop = {id(t) for t in targets} if targets is not None else set()
    order = _toposort(outputs, stop)
    if targets is not None:
        # prune to nodes that can reach a requested input
        wanted = set(stop)
        useful: set[int] = set()
        for t in reversed(order):
            if any(id(p) in wanted or id(p) in useful for p in t._node.parents):
                useful.add(id(t))
        order = [t for t in order if id(t) in useful]

    grads: dict[int, Tensor] = {}
    keep: dict[int, Tensor] = {}
    for t, s in zip(outputs, seeds):
        _accum(grads, keep, t, s)

    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            if node.vjp is None:
                raise GraphError(
                    f"graph through {node.op!r} was already released by a previous "
                    "backward; pass retain_graph=True or rebuild the forward pass"
                )
            pgrads = node.vjp(g)
            if not retain_graph:
                node.vjp = None
            for p, pg in zip(node.parents, pgrads):
                if pg is not None and p.requires_grad:
                    _accum(grads, keep, p, pg)
    if targets is not None:
        return [grads.get(id(t)) for t in targets]
    if accumulate:
        for key, g in grads.items():
            leaf = keep[key]
            if leaf._node is None:
                leaf.grad = g if leaf.grad is None else Tensor(leaf.grad.data + g.data)
    return None


def _accum(grads, keep, t, g):
    g = as_tensor(g)
    key = id(t)
    keep[key] = t
    if key in grads:
        grads[key] = add(grads[key], g)
    else:
        grads[key] = g


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` of every grad-requiring leaf reachable from ``loss``."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring gradients")
    if loss._node is None:
        loss.grad = Tensor(np.ones_like(loss.data))
        return
    _run_backward([loss], [Tensor(np.ones_like(loss.data))], None, False, retain_graph, True)


def grad(
    outputs: Tensor | Sequence[Tensor],
    inputs: Tensor | Sequence[Tensor],
    grad_outputs=None,
    create_graph: bool = False,
    retain_graph: bool | None = None,
) -> list[Tensor]:
    """Functional vector-Jacobian product; never touches ``.grad``.

    Inputs with no path from ``outputs`` receive zero tensors.
    """
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    if grad_outputs is None:
        for o in outputs:
            if o.size != 1:
                raise GraphError("grad_outputs required for non-scalar outputs")
        grad_outputs = [Tensor(np.ones_like(o.data)) for o in outputs]
    elif isinstance(grad_outputs, (Tensor, np.ndarray)):
        grad_outputs = [grad_outputs]
    if retain_graph is None:
        retain_graph = create_graph
    live = [(o, s) for o, s in zip(outputs, grad_outputs) if o.requires_grad]
    res: list = [None] * len(inputs)
    if live:
        # an output that is itself an input contributes its seed directly
        res = _run_backward(
            [o for o, _ in live], [as_tensor(s) for _, s in live], inputs,
            create_graph, retain_graph, False,
        )
    return [r if r is not None else Tensor(np.zeros(i.shape)) for r, i in zip(res, inputs)]


def finite_difference_gradient(f: Callable[[np.ndarray], float], at, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(_scalar(f(x)))
        flat[i] = orig - h
        fm = float(_scalar(f(x)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def _scalar(v):
    return v.data if isinstance(v, Tensor) else v
