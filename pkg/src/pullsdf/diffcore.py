"""Expression graphs with nested reverse-mode differentiation.

Graphs are built from immutable :class:`Node` objects. Every primitive ships a
forward rule and a vector-Jacobian rule that is itself written with graph
nodes, so the gradient of a graph is another graph and can be differentiated
again. That is all the pipeline needs for losses that contain spatial
gradients of the field (double backpropagation).

Values are float64 numpy arrays. Leaves are named and bound at evaluation
time; leaf ``kind`` partitions them into ``parameter``, ``points`` and plain
``input`` leaves.
"""

from __future__ import annotations

import itertools
import math
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "UnboundLeafError",
    "ShapeMismatchError",
    "NonFiniteError",
    "Node",
    "ExprGraph",
    "GradientBundle",
    "Evaluation",
    "parameter",
    "points",
    "leaf",
    "const",
    "affine",
    "matmul",
    "transpose",
    "sin",
    "relu",
    "absolute",
    "power",
    "minimum",
    "maximum",
    "hadamard",
    "add",
    "sub",
    "divide",
    "concatenate",
    "sum",
    "mean",
    "squared_norm",
    "euclidean_norm",
    "cosine_similarity",
    "softmax2",
    "stop_gradient",
    "zeros_like",
    "ones_like",
    "gradients",
    "spatial_gradient",
    "evaluate",
    "point_gradient",
    "parameter_gradient",
    "finite_difference_probe",
]

_ids = itertools.count()

LEAF_KINDS = ("parameter", "points", "input")
NORM_FLOOR = 1e-16
COSINE_FLOOR = 1e-12


class GraphError(Exception):
    """Base class for graph construction and evaluation failures."""


class UnboundLeafError(GraphError):
    pass


class ShapeMismatchError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


_interned: "weakref.WeakValueDictionary[tuple, Node]" = weakref.WeakValueDictionary()


class Node:
    """One primitive application. Nodes are immutable and hash by identity.

    Non-leaf nodes are interned: building the same primitive on the same
    inputs twice returns the existing node, so repeated derivative terms are
    evaluated once per pass.
    """

    __slots__ = ("op", "inputs", "attrs", "id", "__weakref__")

    def __new__(cls, op: str, inputs: Sequence["Node"] = (), **attrs):
        if op not in _FORWARD:
            raise GraphError(f"unknown primitive {op!r}")
        key = None
        if op not in ("leaf", "const"):
            key = (op, tuple(i.id for i in inputs), tuple(sorted(attrs.items())))
            hit = _interned.get(key)
            if hit is not None:
                return hit
        self = object.__new__(cls)
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs
        self.id = next(_ids)
        if key is not None:
            _interned[key] = self
        return self

    @property
    def name(self) -> str | None:
        return self.attrs.get("name")

    def __repr__(self) -> str:
        if self.op == "leaf":
            return f"<leaf {self.attrs['kind']}:{self.attrs['name']}>"
        return f"<{self.op}#{self.id}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    def __rmul__(self, other):
        return hadamard(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return hadamard(self, -1.0)

    def __pow__(self, p):
        return power(self, p)


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return const(x)


# -- constructors -----------------------------------------------------------


def leaf(name: str, kind: str = "input") -> Node:
    if kind not in LEAF_KINDS:
        raise GraphError(f"leaf kind must be one of {LEAF_KINDS}, got {kind!r}")
    return Node("leaf", name=name, kind=kind)


def parameter(name: str) -> Node:
    return leaf(name, "parameter")


def points(name: str = "points") -> Node:
    return leaf(name, "points")


_scalar_consts: "weakref.WeakValueDictionary[tuple, Node]" = weakref.WeakValueDictionary()


def const(value) -> Node:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    if arr.ndim == 0:
        v = float(arr)
        key = (v, math.copysign(1.0, v))
        hit = _scalar_consts.get(key)
        if hit is None:
            hit = _scalar_consts[key] = Node("const", value=arr)
        return hit
    return Node("const", value=arr)


def affine(x, weight, bias=None) -> Node:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    ins = [_as_node(x), _as_node(weight)]
    if bias is not None:
        ins.append(_as_node(bias))
    return Node("affine", ins)


def matmul(a, b) -> Node:
    return Node("matmul", [_as_node(a), _as_node(b)])


def transpose(a) -> Node:
    return Node("transpose", [_as_node(a)])


def sin(x, shift: float = 0.0) -> Node:
    """``sin(x + shift)``; derivatives are phase-shifted sines.

    Half-turn shifts reuse the unshifted node with a sign flip, so a chain of
    derivatives only ever evaluates ``sin`` and ``cos`` of a given input.
    """
    shift = float(shift)
    q = shift / (math.pi / 2)
    if q == round(q):
        k = int(round(q)) % 4
        if k >= 2:
            return hadamard(Node("sin", [_as_node(x)], shift=(k - 2) * (math.pi / 2)), -1.0)
        shift = k * (math.pi / 2)
    return Node("sin", [_as_node(x)], shift=shift)


def relu(x) -> Node:
    return Node("relu", [_as_node(x)])


def absolute(x) -> Node:
    return Node("abs", [_as_node(x)])


def power(x, p: float) -> Node:
    return Node("power", [_as_node(x)], p=float(p))


def minimum(a, b) -> Node:
    return Node("minimum", [_as_node(a), _as_node(b)])


def maximum(a, b) -> Node:
    return Node("maximum", [_as_node(a), _as_node(b)])


def hadamard(a, b) -> Node:
    return Node("mul", [_as_node(a), _as_node(b)])


def add(a, b) -> Node:
    return Node("add", [_as_node(a), _as_node(b)])


def sub(a, b) -> Node:
    return Node("add", [_as_node(a), hadamard(b, -1.0)])


def divide(a, b) -> Node:
    return hadamard(a, power(b, -1.0))


def concatenate(xs: Sequence, axis: int = -1) -> Node:
    return Node("concat", [_as_node(x) for x in xs], axis=axis)


def sum(x, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    return Node("sum", [_as_node(x)], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Node:
    return Node("mean", [_as_node(x)], axis=axis, keepdims=keepdims)


def squared_norm(x, axis: int = -1, keepdims: bool = False) -> Node:
    x = _as_node(x)
    return sum(x * x, axis=axis, keepdims=keepdims)


def euclidean_norm(x, axis: int = -1, keepdims: bool = False) -> Node:
    # floor on the squared norm keeps the derivative finite at the origin
    sq = squared_norm(x, axis=axis, keepdims=keepdims)
    return power(maximum(sq, NORM_FLOOR**2), 0.5)


def cosine_similarity(a, b, axis: int = -1) -> Node:
    a, b = _as_node(a), _as_node(b)
    dot = sum(a * b, axis=axis)
    denom = maximum(euclidean_norm(a, axis) * euclidean_norm(b, axis), COSINE_FLOOR)
    return dot / denom


def softmax2(a, b) -> tuple[Node, Node]:
    """Two-way softmax as a pair of stable logistic functions."""
    a, b = _as_node(a), _as_node(b)
    return Node("sigmoid", [a - b]), Node("sigmoid", [b - a])


def stop_gradient(x) -> Node:
    return Node("stop_gradient", [_as_node(x)])


def zeros_like(x) -> Node:
    return Node("zeros_like", [_as_node(x)])


def ones_like(x) -> Node:
    return Node("ones_like", [_as_node(x)])


# -- forward rules ----------------------------------------------------------


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    return np.sum(g, axis=axes, keepdims=True).reshape(shape)


def _expand(g: np.ndarray, axis, keepdims: bool, like: np.ndarray) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, like.shape)


def _count(x: np.ndarray, axis) -> int:
    if axis is None:
        return x.size
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([x.shape[a] for a in axes]))


def _fwd_affine(node, x, w, b=None):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"{node}: affine input {x.shape} vs weight {w.shape}")
    y = x @ w.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeMismatchError(f"{node}: bias {b.shape} vs weight {w.shape}")
        y += b
    return y


def _fwd_matmul(node, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"{node}: matmul {a.shape} @ {b.shape}")
    return a @ b


def _fwd_power(node, x):
    p = node.attrs["p"]
    if p == 2.0:
        return x * x
    if p == 1.0:
        return x
    if p == 0.5:
        return np.sqrt(x)
    if p == -1.0:
        return 1.0 / x
    if p == 0.0:
        return np.ones_like(x)
    return np.power(x, p)


def _fwd_sigmoid(node, x):
    # logistic with max-subtraction: exp never sees a positive argument
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _fwd_concat(node, *xs):
    try:
        return np.concatenate(xs, axis=node.attrs["axis"])
    except ValueError as exc:
        raise ShapeMismatchError(f"{node}: {exc}") from None


def _fwd_concat_part(node, g, *xs):
    axis = node.attrs["axis"]
    sizes = [x.shape[axis] for x in xs]
    start = int(np.sum(sizes[: node.attrs["index"]]))
    idx = [slice(None)] * g.ndim
    idx[axis] = slice(start, start + sizes[node.attrs["index"]])
    return g[tuple(idx)]


_QUARTER = {0: np.sin, 1: np.cos, 2: lambda x: -np.sin(x), 3: lambda x: -np.cos(x)}


def _fwd_sin(node, x):
    shift = node.attrs["shift"]
    q = shift / (math.pi / 2)
    if q == round(q):
        return _QUARTER[int(round(q)) % 4](x)
    return np.sin(x + shift)


def _binary(fn):
    def run(node, a, b):
        try:
            return fn(a, b)
        except ValueError as exc:
            raise ShapeMismatchError(f"{node}: operands {a.shape} and {b.shape}: {exc}") from None

    return run


_FORWARD: dict[str, Callable] = {
    "leaf": None,
    "const": lambda node: node.attrs["value"],
    "affine": _fwd_affine,
    "matmul": _fwd_matmul,
    "transpose": lambda node, a: a.T,
    "sin": _fwd_sin,
    "relu": lambda node, x: np.maximum(x, 0.0),
    "step": lambda node, x: (x > 0).astype(np.float64),
    "abs": lambda node, x: np.abs(x),
    "sign": lambda node, x: np.sign(x),
    "power": _fwd_power,
    "minimum": _binary(np.minimum),
    "maximum": _binary(np.maximum),
    "le_mask": _binary(lambda a, b: (a <= b).astype(np.float64)),
    "ge_mask": _binary(lambda a, b: (a >= b).astype(np.float64)),
    "mul": _binary(np.multiply),
    "add": _binary(np.add),
    "sum": lambda node, x: np.asarray(np.sum(x, axis=node.attrs["axis"], keepdims=node.attrs["keepdims"])),
    "mean": lambda node, x: np.asarray(np.mean(x, axis=node.attrs["axis"], keepdims=node.attrs["keepdims"])),
    "sum_grad": lambda node, g, x: _expand(g, node.attrs["axis"], node.attrs["keepdims"], x),
    "mean_grad": lambda node, g, x: _expand(g, node.attrs["axis"], node.attrs["keepdims"], x)
    / _count(x, node.attrs["axis"]),
    "sum_to_like": lambda node, g, ref: _sum_to(g, ref.shape),
    "broadcast_like": lambda node, g, ref: np.broadcast_to(g, ref.shape),
    "sigmoid": _fwd_sigmoid,
    "concat": _fwd_concat,
    "concat_part": _fwd_concat_part,
    "stop_gradient": lambda node, x: x,
    "zeros_like": lambda node, x: np.zeros_like(x),
    "ones_like": lambda node, x: np.ones_like(x),
}

# input positions through which no derivative flows
_NONDIFF: dict[str, frozenset] = {
    "leaf": frozenset(),
    "const": frozenset(),
    "step": frozenset({0}),
    "sign": frozenset({0}),
    "le_mask": frozenset({0, 1}),
    "ge_mask": frozenset({0, 1}),
    "stop_gradient": frozenset({0}),
    "zeros_like": frozenset({0}),
    "ones_like": frozenset({0}),
    "sum_grad": frozenset({1}),
    "mean_grad": frozenset({1}),
    "sum_to_like": frozenset({1}),
    "broadcast_like": frozenset({1}),
}


def _nondiff(node: Node, pos: int) -> bool:
    if node.op == "concat_part":
        return pos != 0
    return pos in _NONDIFF.get(node.op, ())


# -- vector-Jacobian rules (built from graph nodes) -------------------------


def _vjp_affine(node, g, needs):
    x, w = node.inputs[0], node.inputs[1]
    out = [
        matmul(g, w) if needs[0] else None,
        matmul(transpose(g), x) if needs[1] else None,
    ]
    if len(node.inputs) == 3:
        out.append(sum(g, axis=0) if needs[2] else None)
    return out


def _vjp_matmul(node, g, needs):
    a, b = node.inputs
    return [
        matmul(g, transpose(b)) if needs[0] else None,
        matmul(transpose(a), g) if needs[1] else None,
    ]


def _vjp_power(node, g, needs):
    (x,) = node.inputs
    p = node.attrs["p"]
    if p == 1.0:
        return [g]
    if p == 2.0:
        return [g * x * 2.0]
    return [g * power(x, p - 1.0) * p]


def _vjp_select(mask_op):
    def rule(node, g, needs):
        a, b = node.inputs
        mask = Node(mask_op, [a, b])
        return [
            Node("sum_to_like", [g * mask, a]) if needs[0] else None,
            Node("sum_to_like", [g * (1.0 - mask), b]) if needs[1] else None,
        ]

    return rule


def _vjp_mul(node, g, needs):
    a, b = node.inputs
    return [
        Node("sum_to_like", [g * b, a]) if needs[0] else None,
        Node("sum_to_like", [g * a, b]) if needs[1] else None,
    ]


def _vjp_add(node, g, needs):
    a, b = node.inputs
    return [
        Node("sum_to_like", [g, a]) if needs[0] else None,
        Node("sum_to_like", [g, b]) if needs[1] else None,
    ]


def _vjp_concat(node, g, needs):
    return [
        Node("concat_part", [g, *node.inputs], axis=node.attrs["axis"], index=i) if need else None
        for i, need in enumerate(needs)
    ]


def _vjp_concat_part(node, g, needs):
    xs = node.inputs[1:]
    k = node.attrs["index"]
    parts = [g if i == k else zeros_like(x) for i, x in enumerate(xs)]
    return [concatenate(parts, axis=node.attrs["axis"])]


_VJP: dict[str, Callable] = {
    "affine": _vjp_affine,
    "matmul": _vjp_matmul,
    "transpose": lambda node, g, needs: [transpose(g)],
    "sin": lambda node, g, needs: [g * sin(node.inputs[0], node.attrs["shift"] + math.pi / 2)],
    "relu": lambda node, g, needs: [g * Node("step", [node.inputs[0]])],
    "abs": lambda node, g, needs: [g * Node("sign", [node.inputs[0]])],
    "power": _vjp_power,
    "minimum": _vjp_select("le_mask"),
    "maximum": _vjp_select("ge_mask"),
    "mul": _vjp_mul,
    "add": _vjp_add,
    "sum": lambda node, g, needs: [Node("sum_grad", [g, node.inputs[0]], **node.attrs)],
    "mean": lambda node, g, needs: [Node("mean_grad", [g, node.inputs[0]], **node.attrs)],
    "sum_grad": lambda node, g, needs: [sum(g, node.attrs["axis"], node.attrs["keepdims"]), None],
    "mean_grad": lambda node, g, needs: [mean(g, node.attrs["axis"], node.attrs["keepdims"]), None],
    "sum_to_like": lambda node, g, needs: [Node("broadcast_like", [g, node.inputs[0]]), None],
    "broadcast_like": lambda node, g, needs: [Node("sum_to_like", [g, node.inputs[0]]), None],
    "sigmoid": lambda node, g, needs: [g * node * (1.0 - node)],
    "concat": _vjp_concat,
    "concat_part": _vjp_concat_part,
}


# -- traversal --------------------------------------------------------------


def topological_order(outputs: Iterable[Node]) -> list[Node]:
    """Deterministic post-order over everything reachable from ``outputs``."""
    order: list[Node] = []
    seen: set[int] = set()
    for root in outputs:
        if root.id in seen:
            continue
        stack = [(root, 0)]
        while stack:
            node, i = stack.pop()
            if i < len(node.inputs):
                stack.append((node, i + 1))
                child = node.inputs[i]
                if child.id not in seen:
                    stack.append((child, 0))
            elif node.id not in seen:
                seen.add(node.id)
                order.append(node)
    return order


def gradients(y: Node, wrt: Sequence[Node], seed: Node | None = None) -> list[Node]:
    """Symbolic reverse-mode: graph nodes for d(seed . y)/d(wrt).

    ``seed`` defaults to ones shaped like ``y``, i.e. the gradient of the sum
    of ``y``. Inputs unreachable through differentiable edges get zeros.
    """
    order = topological_order([y])
    targets = {w.id for w in wrt}
    live: set[int] = set()
    for node in order:
        if node.id in targets or any(
            inp.id in live and not _nondiff(node, pos) for pos, inp in enumerate(node.inputs)
        ):
            live.add(node.id)

    adj: dict[int, Node] = {}
    if y.id in live:
        adj[y.id] = seed if seed is not None else ones_like(y)
    for node in reversed(order):
        g = adj.get(node.id)
        if g is None or not node.inputs:
            continue
        needs = [inp.id in live and not _nondiff(node, pos) for pos, inp in enumerate(node.inputs)]
        if not any(needs):
            continue
        for inp, gi, need in zip(node.inputs, _VJP[node.op](node, g, needs), needs):
            if need and gi is not None:
                prev = adj.get(inp.id)
                adj[inp.id] = gi if prev is None else add(prev, gi)
    return [adj.get(w.id) if w.id in adj else zeros_like(w) for w in wrt]


def spatial_gradient(f: Node, pts: Node) -> Node:
    """Graph extension for the per-point gradient of a scalar-per-point field.

    Each output row depends only on its own point row, so the gradient of the
    sum is the stack of per-point gradients.
    """
    return gradients(f, [pts])[0]


# -- evaluation -------------------------------------------------------------


class Evaluation:
    """Memoised lazy evaluation of nodes under one set of leaf bindings.

    New leaves may be bound between calls, provided nothing already computed
    depends on them. Used for the pulling loop, where nearest-neighbour
    targets are looked up from values computed earlier in the same pass.
    """

    def __init__(self, bindings: Mapping[str, np.ndarray] | None = None):
        self.bindings: dict[str, np.ndarray] = {}
        self.memo: dict[int, np.ndarray] = {}
        if bindings:
            self.bind(bindings)

    def bind(self, bindings: Mapping[str, np.ndarray]) -> None:
        for name, value in bindings.items():
            self.bindings[name] = np.asarray(value, dtype=np.float64)

    def _compute(self, node: Node) -> np.ndarray:
        if node.op == "leaf":
            try:
                return self.bindings[node.attrs["name"]]
            except KeyError:
                raise UnboundLeafError(f"leaf {node.attrs['name']!r} ({node.attrs['kind']}) is unbound") from None
        vals = [self.memo[inp.id] for inp in node.inputs]
        out = _FORWARD[node.op](node, *vals)
        return out if isinstance(out, np.ndarray) else np.asarray(out, dtype=np.float64)

    def run(self, order: Sequence[Node]) -> None:
        memo = self.memo
        # non-finite results are detected and reported on request instead
        with np.errstate(all="ignore"):
            for node in order:
                if node.id not in memo:
                    memo[node.id] = self._compute(node)

    def value(self, node: Node) -> np.ndarray:
        return self.values([node])[0]

    def values(self, nodes: Sequence[Node], check_finite: bool = True) -> list[np.ndarray]:
        missing = [n for n in nodes if n.id not in self.memo]
        if missing:
            order = _pending_order(missing, self.memo)
            self.run(order)
        out = [self.memo[n.id] for n in nodes]
        if check_finite:
            for n, v in zip(nodes, out):
                if not np.all(np.isfinite(v)):
                    raise NonFiniteError(_first_nonfinite(self, n))
        return out


def _pending_order(nodes: Sequence[Node], memo: Mapping[int, np.ndarray]) -> list[Node]:
    # post-order that stops descending at already-computed nodes
    order: list[Node] = []
    seen: set[int] = set(memo)
    for root in nodes:
        if root.id in seen:
            continue
        stack = [(root, 0)]
        while stack:
            node, i = stack.pop()
            if i < len(node.inputs):
                stack.append((node, i + 1))
                child = node.inputs[i]
                if child.id not in seen:
                    stack.append((child, 0))
            elif node.id not in seen:
                seen.add(node.id)
                order.append(node)
    return order


def _first_nonfinite(ev: Evaluation, out: Node) -> str:
    for node in topological_order([out]):
        v = ev.memo.get(node.id)
        if v is not None and not np.all(np.isfinite(v)):
            return f"non-finite value produced at {node} (inputs {list(node.inputs)})"
    return f"non-finite value at {out}"


class ExprGraph:
    """Named outputs over a fixed node set; immutable once built.

    Gradient extensions requested through :func:`point_gradient` and
    :func:`parameter_gradient` are compiled once and cached on the graph.
    """

    def __init__(self, outputs: Mapping[str, Node]):
        if not outputs:
            raise GraphError("graph needs at least one output")
        self.outputs: dict[str, Node] = {k: _as_node(v) for k, v in outputs.items()}
        self.order = topological_order(self.outputs.values())
        self.leaves: dict[str, Node] = {}
        for node in self.order:
            if node.op == "leaf":
                self.leaves.setdefault(node.attrs["name"], node)
        self._cache: dict = {}

    def leaves_of_kind(self, kind: str) -> dict[str, Node]:
        return {k: v for k, v in self.leaves.items() if v.attrs["kind"] == kind}

    @property
    def parameters(self) -> dict[str, Node]:
        return self.leaves_of_kind("parameter")

    @property
    def points(self) -> dict[str, Node]:
        return self.leaves_of_kind("points")

    def _single(self, mapping: Mapping[str, Node], what: str, name: str | None) -> tuple[str, Node]:
        if name is not None:
            return name, mapping[name]
        if len(mapping) != 1:
            raise GraphError(f"graph has {len(mapping)} {what}; designate one by name")
        return next(iter(mapping.items()))


@dataclass
class GradientBundle:
    value: np.ndarray
    point_jacobian: np.ndarray | None = None
    parameter_gradients: dict[str, np.ndarray] = field(default_factory=dict)


def _check_order(graph: ExprGraph, order: Sequence[Node]) -> None:
    pos = {n.id: i for i, n in enumerate(order)}
    if set(pos) != {n.id for n in graph.order}:
        raise GraphError("custom order must cover exactly the graph's nodes")
    for n in order:
        for inp in n.inputs:
            if pos[inp.id] >= pos[n.id]:
                raise GraphError(f"custom order is not topological at {n}")


def evaluate(
    graph: ExprGraph,
    bindings: Mapping[str, np.ndarray],
    order: Sequence[Node] | None = None,
    check_finite: bool = True,
) -> dict[str, np.ndarray]:
    """Forward values of every named output."""
    missing = sorted(set(graph.leaves) - set(bindings))
    if missing:
        raise UnboundLeafError(f"unbound leaves: {missing}")
    if order is not None:
        _check_order(graph, order)
    ev = Evaluation(bindings)
    ev.run(graph.order if order is None else order)
    names = list(graph.outputs)
    vals = ev.values([graph.outputs[k] for k in names], check_finite=check_finite)
    return dict(zip(names, vals))


def point_gradient(
    graph: ExprGraph,
    bindings: Mapping[str, np.ndarray],
    output: str | None = None,
    points_leaf: str | None = None,
) -> GradientBundle:
    """Per-point spatial gradient of a scalar-per-point output."""
    out_name, out = graph._single(graph.outputs, "outputs", output)
    pts_name, pts = graph._single(graph.points, "points leaves", points_leaf)
    key = ("point", out_name, pts_name)
    if key not in graph._cache:
        graph._cache[key] = spatial_gradient(out, pts)
    ev = Evaluation(bindings)
    value = ev.value(out)
    p = ev.bindings[pts_name]
    if p.ndim != 2 or value.size != p.shape[0] or value.ndim > 2:
        raise GraphError(f"output {out_name!r} has shape {value.shape}; need one scalar per point of {p.shape}")
    jac = ev.value(graph._cache[key])
    return GradientBundle(value=value, point_jacobian=jac)


def parameter_gradient(
    graph: ExprGraph,
    bindings: Mapping[str, np.ndarray],
    output: str | None = None,
) -> GradientBundle:
    """Gradient of a scalar output with respect to every parameter leaf.

    Also reports the gradient with respect to the (single) points leaf when
    the graph has one.
    """
    out_name, out = graph._single(graph.outputs, "outputs", output)
    params = graph.parameters
    pts = graph.points
    key = ("param", out_name)
    if key not in graph._cache:
        wrt = list(params.values()) + list(pts.values())
        graph._cache[key] = gradients(out, wrt)
    nodes = graph._cache[key]
    ev = Evaluation(bindings)
    value = ev.value(out)
    if value.size != 1:
        raise GraphError(f"loss {out_name!r} must be a scalar, got shape {value.shape}")
    vals = ev.values(nodes)
    grads = dict(zip(params, vals[: len(params)]))
    jac = vals[len(params)] if len(pts) == 1 else None
    return GradientBundle(value=value, point_jacobian=jac, parameter_gradients=grads)


def finite_difference_probe(
    graph: ExprGraph,
    bindings: Mapping[str, np.ndarray],
    leaf_name: str,
    step: float = 1e-5,
    output: str | None = None,
    eps: float = 1e-12,
) -> float:
    """Max entrywise relative error of the analytic gradient of ``sum(output)``
    against central differences in ``leaf_name``."""
    if step <= 0:
        raise ValueError("step must be positive")
    out_name, out = graph._single(graph.outputs, "outputs", output)
    key = ("probe", out_name, leaf_name)
    if key not in graph._cache:
        graph._cache[key] = gradients(out, [graph.leaves[leaf_name]])[0]
    analytic = Evaluation(bindings).value(graph._cache[key])

    base = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    x = base[leaf_name]
    numeric = np.zeros_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = np.sum(Evaluation(base).value(out))
        flat[i] = orig - step
        fm = np.sum(Evaluation(base).value(out))
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * step)
    analytic = np.broadcast_to(analytic, x.shape)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + eps), initial=0.0))
