"""Reverse-mode automatic differentiation over dense numpy arrays.

A Node wraps the forward value of one operation together with its
accumulated gradient and references to the nodes it was computed from.
Ops build an acyclic graph; ``backward`` walks the reachable subgraph in
reverse creation order and adds exact gradients into every node.

Two precisions are supported: float32 for training speed and float64 for
verification (finite-difference gradient checks are only trustworthy in
64-bit).  Ops preserve the dtype of their inputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

float32 = np.float32
float64 = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's shape rule."""


_node_counter = itertools.count()


class Node:
    """One vertex of the computation graph.

    ``value`` holds the forward result, ``grad`` the accumulated
    d(loss)/d(value) (lazily allocated: None until a backward pass reaches
    the node).  ``op`` and ``parents`` record the producing operation.
    """

    __slots__ = ("value", "grad", "op", "parents", "_backward", "_seq", "_g")

    def __init__(self, value, op="leaf", parents=(), backward=None):
        self.value = value
        self.grad = None
        self.op = op
        self.parents = parents
        self._backward = backward
        self._seq = next(_node_counter)
        self._g = None  # transient per-backward-call accumulator

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def leaf(value, dtype=None) -> Node:
    """Wrap an array (or nested sequence) as a graph leaf."""
    arr = np.asarray(value, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(float64)
    return Node(arr)


def zeros(shape, dtype=float32) -> Node:
    return Node(np.zeros(shape, dtype=dtype))


def zero_grads(nodes) -> None:
    """Reset accumulated gradients on the given nodes."""
    for n in nodes:
        n.grad = None


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every reachable node.

    Requires a scalar-shaped loss.  Calling backward again without zeroing
    adds another copy of the gradients (supports summing over a minibatch
    and shared-parameter reuse).
    """
    if loss.value.size != 1:
        raise ValueError(
            f"backward requires a scalar loss, got shape {loss.value.shape}"
        )
    # Collect the reachable subgraph.  Creation order is a topological
    # order (parents are always created before children), so processing by
    # descending sequence number visits every child before its parents.
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        nodes.append(n)
        stack.extend(n.parents)
    nodes.sort(key=lambda n: n._seq, reverse=True)

    loss._g = np.ones_like(loss.value)
    for n in nodes:
        g = n._g
        if g is None:
            continue  # no gradient path reached this node
        n._g = None
        n.grad = g if n.grad is None else n.grad + g
        if n._backward is None:
            continue
        for p, pg in zip(n.parents, n._backward(g)):
            if pg is None:
                continue
            # Never accumulate in place: backward functions may return
            # aliased arrays (e.g. add gives the same array to both parents).
            p._g = pg if p._g is None else p._g + pg


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    """Matrix product: (n,m)@(m,p), (m,)@(m,p) or (n,m)@(m,)."""
    av, bv = a.value, b.value
    ok = (
        (av.ndim == 2 and bv.ndim == 2 and av.shape[1] == bv.shape[0])
        or (av.ndim == 1 and bv.ndim == 2 and av.shape[0] == bv.shape[0])
        or (av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0])
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")

    def back(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 1:  # (m,) @ (m,p) -> (p,)
            return bv @ g, av[:, None] * g[None, :]
        return g[:, None] * bv[None, :], av.T @ g  # (n,m) @ (m,) -> (n,)

    return Node(av @ bv, "matmul", (a, b), back)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; also allows a row-broadcast bias: (n,m)+(m,)."""
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return Node(av + bv, "add", (a, b), lambda g: (g, g))
    if av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        return Node(av + bv, "add", (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {av.shape} + {bv.shape}")


def mul(a: Node, b: Node) -> Node:
    """Elementwise (Hadamard) product of same-shape operands."""
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"mul: incompatible shapes {av.shape} * {bv.shape}")
    return Node(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def neg(a: Node) -> Node:
    return Node(-a.value, "neg", (a,), lambda g: (-g,))


def concat(xs: Sequence[Node]) -> Node:
    """Concatenate along axis 0; trailing dimensions must match."""
    if not xs:
        raise ShapeError("concat: empty input list")
    trailing = xs[0].value.shape[1:]
    for x in xs:
        if x.value.ndim == 0 or x.value.shape[1:] != trailing:
            raise ShapeError(
                f"concat: incompatible shapes {[x.value.shape for x in xs]}"
            )
    sizes = [x.value.shape[0] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[offsets[k] : offsets[k + 1]] for k in range(len(xs)))

    return Node(np.concatenate([x.value for x in xs]), "concat", tuple(xs), back)


def stack(xs: Sequence[Node]) -> Node:
    """Stack k same-shape vectors into a (k, d) matrix."""
    if not xs:
        raise ShapeError("stack: empty input list")
    shape = xs[0].value.shape
    for x in xs:
        if x.value.shape != shape:
            raise ShapeError(
                f"stack: incompatible shapes {[x.value.shape for x in xs]}"
            )

    def back(g):
        return tuple(g[k] for k in range(len(xs)))

    return Node(np.stack([x.value for x in xs]), "stack", tuple(xs), back)


def slice_(a: Node, start: int, stop: int) -> Node:
    """Contiguous slice [start:stop] along axis 0."""
    n = a.value.shape[0] if a.value.ndim else 0
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: range [{start}:{stop}] outside axis of size {n}")

    def back(g):
        z = np.zeros_like(a.value)
        z[start:stop] = g
        return (z,)

    return Node(a.value[start:stop], "slice", (a,), back)


def reshape(a: Node, shape) -> Node:
    orig = a.value.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {orig} -> {shape}: {exc}") from exc
    return Node(out, "reshape", (a,), lambda g: (g.reshape(orig),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-free at both tails, preserves dtype
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a: Node) -> Node:
    out = _sigmoid(a.value)
    return Node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a: Node) -> Node:
    """Numerically stable softmax over the last axis."""
    v = a.value
    if v.ndim == 0:
        raise ShapeError("softmax: requires at least one axis")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return Node(out, "softmax", (a,), back)


def embedding_lookup(table: Node, indices) -> Node:
    """Select rows of a (V, d) table by integer index (int or sequence)."""
    if table.value.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding_lookup: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise IndexError(
            f"embedding_lookup: index out of range for table of {table.value.shape[0]} rows"
        )

    def back(g):
        z = np.zeros_like(table.value)
        np.add.at(z, idx, g)
        return (z,)

    return Node(table.value[idx], "embedding_lookup", (table,), back)


def cross_entropy(logits: Node, target: int) -> Node:
    """-log softmax(logits)[target] for a 1-D logits vector, via log-sum-exp."""
    v = logits.value
    if v.ndim != 1:
        raise ShapeError(f"cross_entropy: logits must be 1-D, got {v.shape}")
    if not (0 <= target < v.shape[0]):
        raise IndexError(
            f"cross_entropy: target {target} out of range for {v.shape[0]} classes"
        )
    m = v.max()
    lse = m + np.log(np.exp(v - m).sum())

    def back(g):
        p = np.exp(v - lse)
        p[target] -= 1.0
        return (g * p,)

    return Node(np.asarray(lse - v[target]), "cross_entropy", (logits,), back)


def sum_all(a: Node) -> Node:
    """Sum of all elements, as a scalar node."""
    return Node(
        np.asarray(a.value.sum()), "sum", (a,), lambda g: (np.ones_like(a.value) * g,)
    )


_OPS: dict[str, Callable] = {
    "matmul": lambda inputs, **kw: matmul(*inputs),
    "add": lambda inputs, **kw: add(*inputs),
    "mul": lambda inputs, **kw: mul(*inputs),
    "concat": lambda inputs, **kw: concat(inputs),
    "sigmoid": lambda inputs, **kw: sigmoid(*inputs),
    "tanh": lambda inputs, **kw: tanh(*inputs),
    "softmax": lambda inputs, **kw: softmax(*inputs),
    "embedding_lookup": lambda inputs, indices: embedding_lookup(inputs[0], indices),
    "cross_entropy": lambda inputs, target: cross_entropy(inputs[0], target),
    "slice": lambda inputs, start, stop: slice_(inputs[0], start, stop),
    # extras beyond the core set
    "neg": lambda inputs, **kw: neg(*inputs),
    "stack": lambda inputs, **kw: stack(inputs),
    "reshape": lambda inputs, shape: reshape(inputs[0], shape),
    "sum": lambda inputs, **kw: sum_all(*inputs),
}


def apply(op_kind: str, inputs: Sequence[Node], **kwargs) -> Node:
    """Dispatch an operation by name; see _OPS for the supported kinds."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(list(inputs), **kwargs)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, point: np.ndarray, epsilon: float = 1e-5) -> float:
    """Compare analytic and central finite-difference gradients of f.

    ``f`` maps a leaf Node built from ``point`` to a scalar Node.  Returns
    the max over coordinates of |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8).  Only meaningful in 64-bit, so float64 is required.
    """
    point = np.asarray(point)
    if point.dtype != np.float64:
        raise ValueError("grad_check requires a float64 point (verification mode)")

    x = leaf(point.copy())
    out = f(x)
    if out.value.size != 1:
        raise ValueError(f"grad_check: f must be scalar-valued, got {out.value.shape}")
    backward(out)
    analytic = np.zeros_like(point) if x.grad is None else x.grad

    numeric = np.zeros_like(point)
    flat = point.copy()
    for k in range(flat.size):
        orig = flat.flat[k]
        flat.flat[k] = orig + epsilon
        up = float(f(leaf(flat.copy())).value)
        flat.flat[k] = orig - epsilon
        down = float(f(leaf(flat.copy())).value)
        flat.flat[k] = orig
        numeric.flat[k] = (up - down) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
