"""Reverse-mode automatic differentiation over dense float64 arrays.

Every value lives in a :class:`Node` owned by an append-only :class:`Graph`.
Adjoint rules are written in terms of the same node operations as the forward
pass, so calling :func:`grad` with ``create_graph=True`` records the derivative
computation in the graph and the result can be differentiated again.

Broadcasting is deliberately restricted: a binary op accepts two equal shapes,
or a 0-d scalar against any shape. Everything else goes through the explicit
:func:`broadcast` op.

Gradients with respect to nodes that do not influence the loss are returned as
zero tensors rather than raising.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "Graph",
    "Node",
    "no_record",
    "elementwise",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "tanh",
    "relu",
    "square",
    "reciprocal",
    "matmul",
    "transpose",
    "sum",
    "mean",
    "broadcast",
    "reshape",
    "slice_axis",
    "pad_axis",
    "concat",
    "logsumexp",
    "grad",
    "hessian_vector_product",
]


class AutodiffError(Exception):
    """Base class for errors raised by the differentiation engine."""


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Evaluate ops without recording them as differentiable."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Graph:
    """Append-only node factory. Not safe for concurrent writers.

    Nodes are reachable only through their outputs, so a graph holds no node
    list; that keeps graph and nodes free of reference cycles and lets large
    intermediates go as soon as the last result referencing them does.
    """

    def __init__(self) -> None:
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def _append(self, node: "Node") -> None:
        node.id = self._count
        self._count += 1

    def param(self, value, name: str | None = None) -> "Node":
        """A leaf that gradients can be taken with respect to."""
        return self._leaf(value, True, name)

    def constant(self, value, name: str | None = None) -> "Node":
        return self._leaf(value, False, name)

    def _leaf(self, value, requires_grad: bool, name: str | None) -> "Node":
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value supplied for leaf {name or ''}".rstrip())
        node = Node(self, "param" if requires_grad else "const", (), arr, requires_grad)
        node.name = name
        self._append(node)
        return node


class Node:
    __slots__ = ("graph", "id", "op", "inputs", "value", "requires_grad", "attrs", "name")
    __array_priority__ = 1000

    def __init__(self, graph, op, inputs, value, requires_grad, attrs=None):
        self.graph = graph
        self.id = -1
        self.op = op
        self.inputs = inputs
        self.value = value
        self.requires_grad = requires_grad
        self.attrs = attrs
        self.name = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Node":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Node(id={self.id}, op={self.op}, shape={self.shape}{flag})"

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
        return mul(self, reciprocal(_lift(other, self.graph)))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _lift(x, graph: Graph) -> Node:
    if isinstance(x, Node):
        if x.graph is not graph:
            raise AutodiffError("cannot combine nodes from different graphs")
        return x
    return graph.constant(x)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise TypeError("at least one operand must be a Node")


def _make(op: str, inputs: Sequence[Node], value, attrs=None) -> Node:
    graph = inputs[0].graph
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    rg = _recording() and any(i.requires_grad for i in inputs)
    node = Node(graph, op, tuple(inputs) if rg else (), value, rg, attrs)
    graph._append(node)
    return node


def _binary_shapes(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


# ---------------------------------------------------------------- primitives


def add(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = _lift(a, g), _lift(b, g)
    _binary_shapes("add", a, b)
    return _make("add", (a, b), a.value + b.value)


def sub(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = _lift(a, g), _lift(b, g)
    _binary_shapes("sub", a, b)
    return _make("sub", (a, b), a.value - b.value)


def mul(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = _lift(a, g), _lift(b, g)
    _binary_shapes("mul", a, b)
    return _make("mul", (a, b), a.value * b.value)


def neg(a: Node) -> Node:
    return _make("neg", (a,), -a.value)


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        return _make("exp", (a,), np.exp(a.value))


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise DomainError("log of non-positive entry")
    return _make("log", (a,), np.log(a.value))


def tanh(a: Node) -> Node:
    return _make("tanh", (a,), np.tanh(a.value))


def relu(a: Node) -> Node:
    # subgradient at exactly 0 is 0
    return _make("relu", (a,), np.where(a.value > 0.0, a.value, 0.0))


def square(a: Node) -> Node:
    return _make("square", (a,), a.value * a.value)


def reciprocal(a: Node) -> Node:
    if np.any(a.value == 0.0):
        raise DomainError("reciprocal of zero entry")
    return _make("reciprocal", (a,), 1.0 / a.value)


def matmul(a, b) -> Node:
    g = _graph_of(a, b)
    a, b = _lift(a, g), _lift(b, g)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return _make("matmul", (a, b), a.value @ b.value)


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d operand, got {a.shape}")
    return _make("transpose", (a,), a.value.T.copy())


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    if axis is not None and not 0 <= axis < a.value.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")
    return _make("sum", (a,), np.sum(a.value, axis=axis), {"axis": axis})


def mean(a: Node, axis: int | None = None) -> Node:
    n = a.size if axis is None else a.shape[axis]
    return sum(a, axis) * (1.0 / n)


def broadcast(a: Node, axis: int, size: int) -> Node:
    """Insert a new axis at ``axis`` and repeat ``a`` ``size`` times along it."""
    if not 0 <= axis <= a.value.ndim:
        raise ShapeError(f"broadcast: axis {axis} out of range for shape {a.shape}")
    shape = a.shape[:axis] + (size,) + a.shape[axis:]
    value = np.broadcast_to(np.expand_dims(a.value, axis), shape).copy()
    return _make("broadcast", (a,), value, {"axis": axis, "size": size})


def reshape(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _make("reshape", (a,), a.value.reshape(shape), {"shape": a.shape})


def slice_axis(a: Node, axis: int, start: int, stop: int) -> Node:
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of length {a.shape[axis]}")
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    return _make(
        "slice", (a,), a.value[tuple(idx)].copy(),
        {"axis": axis, "start": start, "length": a.shape[axis]},
    )


def pad_axis(a: Node, axis: int, start: int, length: int) -> Node:
    """Embed ``a`` into zeros of extent ``length`` along ``axis`` at offset ``start``."""
    if start < 0 or start + a.shape[axis] > length:
        raise ShapeError("pad: target extent too small")
    shape = list(a.shape)
    shape[axis] = length
    out = np.zeros(shape)
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, start + a.shape[axis])
    out[tuple(idx)] = a.value
    return _make("pad", (a,), out, {"axis": axis, "start": start, "stop": start + a.shape[axis]})


def concat(parts: Sequence[Node], axis: int = 0) -> Node:
    g = _graph_of(*parts)
    parts = [_lift(p, g) for p in parts]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts]).tolist()
    return _make("concat", parts, value, {"axis": axis, "offsets": offsets})


def logsumexp(a: Node) -> Node:
    """Row-wise log-sum-exp of a 2-d node, shape (m,)."""
    if a.value.ndim != 2:
        raise ShapeError(f"logsumexp expects a 2-d operand, got {a.shape}")
    m = np.max(a.value, axis=1, keepdims=True)
    value = np.log(np.sum(np.exp(a.value - m), axis=1)) + m[:, 0]
    return _make("logsumexp", (a,), value)


_UNARY = {
    "neg": neg,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "relu": relu,
    "square": square,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_tag: str, a: Node, b: Node | None = None) -> Node:
    """Dispatch an elementwise op by tag."""
    if op_tag in _BINARY:
        if b is None:
            raise TypeError(f"{op_tag} needs two operands")
        return _BINARY[op_tag](a, b)
    if op_tag in _UNARY:
        if b is not None:
            raise TypeError(f"{op_tag} takes one operand")
        return _UNARY[op_tag](a)
    raise ValueError(f"unknown elementwise op {op_tag!r}")


# ------------------------------------------------------------ adjoint rules


def _unbroadcast(g: Node, shape: tuple[int, ...]) -> Node:
    if g.shape == shape:
        return g
    return sum(g)


def _vjp_add(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_sub(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)


def _vjp_mul(node, g):
    a, b = node.inputs
    ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
    gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
    return ga, gb


def _vjp_relu(node, g):
    (a,) = node.inputs
    mask = g.graph.constant((a.value > 0.0).astype(np.float64))
    return (mul(g, mask),)


def _vjp_matmul(node, g):
    a, b = node.inputs
    ga = matmul(g, transpose(b)) if a.requires_grad else None
    gb = matmul(transpose(a), g) if b.requires_grad else None
    return ga, gb


def _vjp_sum(node, g):
    (a,) = node.inputs
    axis = node.attrs["axis"]
    if axis is None:
        return (mul(g, g.graph.constant(np.ones(a.shape))),)
    return (broadcast(g, axis, a.shape[axis]),)


def _vjp_concat(node, g):
    axis = node.attrs["axis"]
    offs = node.attrs["offsets"]
    return tuple(
        slice_axis(g, axis, offs[i], offs[i + 1]) if p.requires_grad else None
        for i, p in enumerate(node.inputs)
    )


def _vjp_logsumexp(node, g):
    (a,) = node.inputs
    n = a.shape[1]
    soft = exp(sub(a, broadcast(node, 1, n)))
    return (mul(broadcast(g, 1, n), soft),)


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "neg": lambda node, g: (neg(g),),
    "exp": lambda node, g: (mul(g, node),),
    "log": lambda node, g: (mul(g, reciprocal(node.inputs[0])),),
    "tanh": lambda node, g: (mul(g, sub(1.0, square(node))),),
    "relu": _vjp_relu,
    "square": lambda node, g: (mul(g, mul(node.inputs[0], 2.0)),),
    "reciprocal": lambda node, g: (neg(mul(g, square(node))),),
    "matmul": _vjp_matmul,
    "transpose": lambda node, g: (transpose(g),),
    "sum": _vjp_sum,
    "broadcast": lambda node, g: (sum(g, node.attrs["axis"]),),
    "reshape": lambda node, g: (reshape(g, node.attrs["shape"]),),
    "slice": lambda node, g: (
        pad_axis(g, node.attrs["axis"], node.attrs["start"], node.attrs["length"]),
    ),
    "pad": lambda node, g: (
        slice_axis(g, node.attrs["axis"], node.attrs["start"], node.attrs["stop"]),
    ),
    "concat": _vjp_concat,
    "logsumexp": _vjp_logsumexp,
}


def _backward_order(loss: Node, wrt: Sequence[Node]) -> list[Node]:
    """Nodes on some path wrt -> loss, in decreasing creation order."""
    seen: dict[int, Node] = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen[n.id] = n
        stack.extend(n.inputs)
    targets = {w.id for w in wrt}
    on_path: set[int] = set()
    for nid in sorted(seen):
        n = seen[nid]
        if nid in targets or any(i.id in on_path for i in n.inputs):
            on_path.add(nid)
    return [seen[nid] for nid in sorted(on_path, reverse=True)]


def grad(loss: Node, wrt: Sequence[Node], create_graph: bool = False) -> list[Node]:
    """Gradients of a scalar ``loss`` with respect to each node in ``wrt``.

    With ``create_graph`` the adjoint computation is recorded and the returned
    nodes can be differentiated again; otherwise they are constants. A node in
    ``wrt`` that the loss does not depend on gets a zero gradient.
    """
    if loss.shape != ():
        raise ShapeError(f"grad needs a scalar loss, got shape {loss.shape}")
    for w in wrt:
        if w.graph is not loss.graph:
            raise AutodiffError("wrt node belongs to a different graph")
        if not w.requires_grad:
            raise AutodiffError(f"wrt node {w.id} does not require grad")
    graph = loss.graph
    ctx = contextlib.nullcontext() if create_graph else no_record()
    with ctx:
        adj: dict[int, Node] = {}
        if loss.requires_grad:
            adj[loss.id] = graph.constant(1.0)
            for node in _backward_order(loss, wrt):
                g = adj.get(node.id)
                if g is None or not node.inputs:
                    continue
                contribs = _VJP[node.op](node, g)
                for inp, c in zip(node.inputs, contribs):
                    if c is None or not inp.requires_grad:
                        continue
                    prev = adj.get(inp.id)
                    adj[inp.id] = c if prev is None else add(prev, c)
        out = []
        for w in wrt:
            g = adj.get(w.id)
            if g is None:
                g = graph.constant(np.zeros(w.shape))
            elif not create_graph and g.requires_grad:
                g = graph.constant(g.value)
            out.append(g)
    return out


def hessian_vector_product(loss: Node, params: Sequence[Node], v) -> np.ndarray:
    """H @ v for the Hessian of ``loss`` w.r.t. the concatenated ``params``."""
    v = np.asarray(v, dtype=np.float64).ravel()
    sizes = [p.size for p in params]
    if v.size != int(np.sum(sizes)):
        raise ShapeError(f"hvp: vector length {v.size} != parameter count {int(np.sum(sizes))}")
    graph = loss.graph
    grads = grad(loss, params, create_graph=True)
    dot = None
    off = 0
    for g, p in zip(grads, params):
        vp = graph.constant(v[off:off + p.size].reshape(p.shape))
        off += p.size
        term = sum(mul(g, vp))
        dot = term if dot is None else add(dot, term)
    hv = grad(dot, params) if dot is not None and dot.requires_grad else [
        graph.constant(np.zeros(p.shape)) for p in params
    ]
    return np.concatenate([h.value.ravel() for h in hv])
