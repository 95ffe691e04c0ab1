"""Reverse-mode differentiation over dense float64 arrays.

The primitive set is deliberately small: affine maps, relu, row-wise l2
normalization, square/sqrt/exp/log, softplus, log-sum-exp, reductions,
elementwise arithmetic, concatenation, gather and linear interpolation.
That is exactly what the encoders, the critic, the pair losses and the
linear probe need; there is no general tensor machinery.

Graphs are built define-by-run: every operation returns a new `Node`
holding the forward value and a closure that maps an output adjoint to
input adjoints.  `backward` walks the graph once in reverse topological
order.  Nodes are immutable after construction, so evaluation is a pure
function of the bound inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

_ZERO_NORM_TOL = 1e-300


class Node:
    """One value in a computation graph, with its local backward rule."""

    __slots__ = ("value", "parents", "vjp", "op")

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # arithmetic sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _as_node(other))

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        return mul(self, _as_node(other))

    def __rmul__(self, other):
        return mul(_as_node(other), self)

    def __truediv__(self, other):
        return div(self, _as_node(other))

    def __rtruediv__(self, other):
        return div(_as_node(other), self)

    def __neg__(self):
        return neg(self)


def constant(x) -> Node:
    """Wrap an array or scalar as a graph leaf that receives no gradient."""
    return Node(x, op="const")


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def _check_broadcast(a: Node, b: Node, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: operands of shape {a.value.shape} and {b.value.shape} "
            "are not compatible"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Node(a.value + b.value, (a, b), vjp, "add")


def sub(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Node(a.value - b.value, (a, b), vjp, "sub")


def mul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Node(av * bv, (a, b), vjp, "mul")


def div(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b, "div")
    av, bv = a.value, b.value

    def vjp(g):
        return (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        )

    return Node(av / bv, (a, b), vjp, "div")


def neg(a: Node) -> Node:
    a = _as_node(a)
    return Node(-a.value, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# unary nonlinearities


def relu(a: Node) -> Node:
    a = _as_node(a)
    mask = a.value > 0.0  # subgradient at 0 is 0
    return Node(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Node) -> Node:
    a = _as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Node) -> Node:
    a = _as_node(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log: input must be strictly positive")
    av = a.value
    return Node(np.log(av), (a,), lambda g: (g / av,), "log")


def square(a: Node) -> Node:
    a = _as_node(a)
    av = a.value
    return Node(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def sqrt(a: Node) -> Node:
    a = _as_node(a)
    if np.any(a.value < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(a.value)

    def vjp(g):
        return (g / (2.0 * out),)

    return Node(out, (a,), vjp, "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Node) -> Node:
    """log(1 + e^x), overflow-safe for |x| up to ~1e4 and beyond."""
    a = _as_node(a)
    out = np.logaddexp(0.0, a.value)
    sig = _sigmoid(np.asarray(a.value, dtype=np.float64))
    return Node(out, (a,), lambda g: (g * sig,), "softplus")


def logsumexp(a: Node, axis: int | None = None) -> Node:
    """Overflow-safe log(sum(exp(x))) over all entries or one axis."""
    a = _as_node(a)
    av = a.value
    if av.size == 0:
        raise ShapeError("logsumexp: empty input")
    m = np.max(av, axis=axis, keepdims=True)
    shifted = np.exp(av - m)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = m + np.log(total)
    soft = shifted / total
    if axis is None:
        out = out.reshape(())

        def vjp(g):
            return (g * soft,)

    else:

        def vjp(g):
            return (np.expand_dims(g, axis) * soft,)

        out = np.squeeze(out, axis=axis)
    return Node(out, (a,), vjp, "logsumexp")


# ---------------------------------------------------------------------------
# reductions and structure


def reduce_sum(a: Node, axis: int | None = None) -> Node:
    a = _as_node(a)
    av = a.value

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    return Node(np.sum(av, axis=axis), (a,), vjp, "sum")


def reduce_mean(a: Node, axis: int | None = None) -> Node:
    a = _as_node(a)
    av = a.value
    count = av.size if axis is None else av.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, av.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, av.shape).copy(),)

    return Node(np.mean(av, axis=axis), (a,), vjp, "mean")


def reshape(a: Node, shape: tuple) -> Node:
    a = _as_node(a)
    orig = a.value.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Node) -> Node:
    a = _as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.value.shape}")
    return Node(a.value.T, (a,), lambda g: (g.T,), "transpose")


def concat(parts: Sequence[Node], axis: int = 0) -> Node:
    parts = [_as_node(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no operands")
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return Node(np.concatenate([p.value for p in parts], axis=axis), parts, vjp, "concat")


def gather_rows(a: Node, indices) -> Node:
    """Select rows (axis 0); the adjoint scatter-adds back."""
    a = _as_node(a)
    idx = np.asarray(indices, dtype=np.intp)
    av = a.value
    if np.any(idx < 0) or np.any(idx >= av.shape[0]):
        raise ShapeError(
            f"gather_rows: index out of range for leading dimension {av.shape[0]}"
        )

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    return Node(av[idx], (a,), vjp, "gather_rows")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {av.shape} @ {bv.shape}"
        )

    def vjp(g):
        return g @ bv.T, av.T @ g

    return Node(av @ bv, (a, b), vjp, "matmul")


def dot(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise ShapeError(f"dot: expected equal-length vectors, got {av.shape}, {bv.shape}")

    def vjp(g):
        return g * bv, g * av

    return Node(av @ bv, (a, b), vjp, "dot")


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b for a batch matrix (B, din) or a single vector (din,)."""
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    xv, wv, bv = x.value, w.value, b.value
    if wv.ndim != 2:
        raise ShapeError(f"affine: weight must be a matrix, got shape {wv.shape}")
    if xv.ndim not in (1, 2) or xv.shape[-1] != wv.shape[0]:
        raise ShapeError(
            f"affine: input shape {xv.shape} does not match weight {wv.shape}"
        )
    if bv.shape != (wv.shape[1],):
        raise ShapeError(f"affine: bias shape {bv.shape} does not match weight {wv.shape}")

    def vjp(g):
        if xv.ndim == 1:
            return g @ wv.T, np.outer(xv, g), g
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return Node(xv @ wv + bv, (x, w, b), vjp, "affine")


def l2_normalize(a: Node) -> Node:
    """Normalize a vector, or each row of a matrix, to unit euclidean norm."""
    a = _as_node(a)
    av = a.value
    if av.ndim == 1:
        n = float(np.linalg.norm(av))
        if n <= _ZERO_NORM_TOL:
            raise DomainError("l2_normalize: zero-norm vector")
        out = av / n

        def vjp(g):
            return ((g - out * (out @ g)) / n,)

    elif av.ndim == 2:
        n = np.linalg.norm(av, axis=1, keepdims=True)
        if np.any(n <= _ZERO_NORM_TOL):
            raise DomainError("l2_normalize: zero-norm row")
        out = av / n

        def vjp(g):
            proj = np.sum(out * g, axis=1, keepdims=True)
            return ((g - out * proj) / n,)

    else:
        raise ShapeError(f"l2_normalize: expected vector or matrix, got {av.shape}")
    return Node(out, (a,), vjp, "l2_normalize")


def lerp(a: Node, b: Node, t) -> Node:
    """a + t * (b - a) with a fixed (non-differentiated) mixing factor t."""
    a, b = _as_node(a), _as_node(b)
    tv = np.asarray(t, dtype=np.float64)
    _check_broadcast(a, b, "lerp")

    def vjp(g):
        return (
            _unbroadcast(g * (1.0 - tv), a.value.shape),
            _unbroadcast(g * tv, b.value.shape),
        )

    return Node(a.value + tv * (b.value - a.value), (a, b), vjp, "lerp")


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Adjoints of `output` (summed if non-scalar) w.r.t. each node in `wrt`.

    Nodes not reachable from `output` get zero gradients of their own shape.
    """
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    for node in reversed(_topo_order(output)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


# ---------------------------------------------------------------------------
# named-graph front end


@dataclass(frozen=True)
class CompGraph:
    """A differentiable expression over named inputs.

    `build` maps a dict of input-name -> Node to the output Node; the
    primitive calls inside it define the graph.  Graphs are stateless, so
    the same CompGraph can be evaluated concurrently on distinct bindings.
    """

    inputs: tuple[str, ...]
    build: Callable[[dict[str, Node]], Node]


@dataclass
class GradTape:
    """Gradients from one backward pass, keyed by input name."""

    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]


def evaluate_with_gradients(
    graph: CompGraph, inputs: dict[str, np.ndarray], wrt: Sequence[str]
) -> tuple[np.ndarray, GradTape]:
    """Forward-evaluate `graph` and return d(output)/d(input) for `wrt`.

    Non-scalar outputs are differentiated through their sum.  Raises
    ShapeError if a binding is missing and checks that every gradient is
    finite.
    """
    missing = [name for name in graph.inputs if name not in inputs]
    if missing:
        raise ShapeError(f"unbound graph inputs: {missing}")
    unknown = [name for name in wrt if name not in graph.inputs]
    if unknown:
        raise ShapeError(f"wrt names not among graph inputs: {unknown}")
    leaves = {name: Node(inputs[name], op=f"input:{name}") for name in graph.inputs}
    out = graph.build(leaves)
    grads = backward(out, [leaves[name] for name in wrt])
    tape = GradTape()
    for name, g in zip(wrt, grads):
        if not np.all(np.isfinite(g)):
            raise DomainError(f"non-finite gradient for input {name!r}")
        tape.grads[name] = g
    return out.value, tape


def finite_difference_check(
    graph: CompGraph,
    point: dict[str, np.ndarray],
    step: float,
    wrt: Sequence[str] | None = None,
) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    The central difference f(x+h)-f(x-h) over 2h only uses forward
    evaluation, so it is an oracle independent of every backward rule.
    Relative error is |analytic - numeric| / max(1, |numeric|), maximized
    over all requested inputs and entries.
    """
    if not (0.0 < step <= 1e-2):
        raise DomainError(f"step must lie in (0, 1e-2], got {step}")
    names = list(wrt) if wrt is not None else list(graph.inputs)
    point = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in point.items()}

    def forward_sum(bound):
        leaves = {name: Node(bound[name], op=f"input:{name}") for name in graph.inputs}
        return float(np.sum(graph.build(leaves).value))

    _, tape = evaluate_with_gradients(graph, point, names)
    worst = 0.0
    for name in names:
        base = point[name]
        flat = base.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = forward_sum(point)
            flat[i] = orig - step
            down = forward_sum(point)
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * step)
        analytic = tape[name].reshape(-1)
        denom = np.maximum(1.0, np.abs(numeric))
        err = np.max(np.abs(analytic - numeric) / denom) if flat.size else 0.0
        worst = max(worst, float(err))
    return worst
