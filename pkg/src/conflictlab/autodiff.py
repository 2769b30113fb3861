"""Small reverse-mode differentiation engine over numpy-valued graph nodes.

A ``Node`` records the operation that produced it, its parents and its
float64 value (scalars are 0-d arrays).  Node ids come from a global counter,
so parents always carry smaller ids than their children and sorting by id is
a valid topological order.

Parameter gradients come from one reverse sweep (:func:`grad`).  Derivatives
of a network output with respect to its inputs are produced by forward-mode
tangent propagation (:func:`jvp`), which emits ordinary graph nodes; applying
it twice gives second derivatives that remain differentiable with respect to
the parameters.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "Node",
    "ParamVector",
    "UnboundLeafError",
    "const",
    "param",
    "variable",
    "as_node",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "square",
    "tanh",
    "sin",
    "cos",
    "exp",
    "log",
    "matmul",
    "transpose",
    "sum",
    "mean",
    "take",
    "reshape",
    "concat",
    "grad",
    "grad_params",
    "jvp",
    "input_derivative",
    "evaluate",
]

_ids = itertools.count()


class UnboundLeafError(ValueError):
    pass


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("id", "op", "parents", "value", "name", "fn", "vjp", "tangent")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, op, parents, value, fn=None, vjp=None, tangent=None, name=None):
        self.id = next(_ids)
        self.op = op
        self.parents = tuple(parents)
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name
        self.fn = fn
        self.vjp = vjp
        self.tangent = tangent

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def is_leaf(self):
        return not self.parents

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def col(self, i):
        """Column ``i`` of a 2-D node as a 1-D node."""
        return take(self, [i], axis=-1).reshape_1d()

    def reshape_1d(self):
        return reshape(self, (self.size,))


# -- leaves -----------------------------------------------------------------

def const(value) -> Node:
    return Node("const", (), value)


def param(value, name: str) -> Node:
    return Node("param", (), value, name=name)


def variable(value, name: str) -> Node:
    """An input leaf (spatial / temporal coordinates)."""
    return Node("input", (), value, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


# -- helpers ----------------------------------------------------------------

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _tsum(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _binary(op, a, b, f, vjp, tangent):
    a, b = as_node(a), as_node(b)
    return Node(op, (a, b), f(a.value, b.value), fn=f, vjp=vjp, tangent=tangent)


def _unary(op, a, f, vjp, tangent):
    a = as_node(a)
    return Node(op, (a,), f(a.value), fn=f, vjp=vjp, tangent=tangent)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Node:
    def vjp(g, node, need):
        pa, pb = node.parents
        return (_unbroadcast(g, pa.shape) if need[0] else None,
                _unbroadcast(g, pb.shape) if need[1] else None)

    def tangent(node, t):
        return _tsum(t[0], t[1])

    return _binary("add", a, b, np.add, vjp, tangent)


def sub(a, b) -> Node:
    def vjp(g, node, need):
        pa, pb = node.parents
        return (_unbroadcast(g, pa.shape) if need[0] else None,
                _unbroadcast(-g, pb.shape) if need[1] else None)

    def tangent(node, t):
        if t[1] is None:
            return t[0]
        return neg(t[1]) if t[0] is None else sub(t[0], t[1])

    return _binary("sub", a, b, np.subtract, vjp, tangent)


def mul(a, b) -> Node:
    def vjp(g, node, need):
        pa, pb = node.parents
        return (_unbroadcast(g * pb.value, pa.shape) if need[0] else None,
                _unbroadcast(g * pa.value, pb.shape) if need[1] else None)

    def tangent(node, t):
        pa, pb = node.parents
        return _tsum(None if t[0] is None else mul(t[0], pb),
                     None if t[1] is None else mul(pa, t[1]))

    return _binary("mul", a, b, np.multiply, vjp, tangent)


def div(a, b) -> Node:
    def vjp(g, node, need):
        pa, pb = node.parents
        return (_unbroadcast(g / pb.value, pa.shape) if need[0] else None,
                _unbroadcast(-g * pa.value / pb.value**2, pb.shape) if need[1] else None)

    def tangent(node, t):
        pa, pb = node.parents
        out = None if t[0] is None else div(t[0], pb)
        if t[1] is not None:
            out = _tsum(out, neg(div(mul(node, t[1]), pb)))
        return out

    return _binary("div", a, b, np.divide, vjp, tangent)


def neg(a) -> Node:
    return _unary("neg", a, np.negative,
                  lambda g, node, need: (-g,),
                  lambda node, t: neg(t[0]))


def power(a, p: float) -> Node:
    """``a ** p`` for a constant exponent."""
    p = float(p)

    def f(v):
        return np.power(v, p)

    def vjp(g, node, need):
        (pa,) = node.parents
        return (g * p * np.power(pa.value, p - 1.0),)

    def tangent(node, t):
        (pa,) = node.parents
        if p == 1.0:
            return t[0]
        return mul(mul(p, power(pa, p - 1.0)), t[0])

    return _unary("pow", a, f, vjp, tangent)


def square(a) -> Node:
    a = as_node(a)
    return mul(a, a)


def tanh(a) -> Node:
    def vjp(g, node, need):
        return (g * (1.0 - node.value**2),)

    def tangent(node, t):
        return mul(sub(1.0, mul(node, node)), t[0])

    return _unary("tanh", a, np.tanh, vjp, tangent)


def sin(a) -> Node:
    def vjp(g, node, need):
        return (g * np.cos(node.parents[0].value),)

    def tangent(node, t):
        return mul(cos(node.parents[0]), t[0])

    return _unary("sin", a, np.sin, vjp, tangent)


def cos(a) -> Node:
    def vjp(g, node, need):
        return (-g * np.sin(node.parents[0].value),)

    def tangent(node, t):
        return neg(mul(sin(node.parents[0]), t[0]))

    return _unary("cos", a, np.cos, vjp, tangent)


def exp(a) -> Node:
    def vjp(g, node, need):
        return (g * node.value,)

    def tangent(node, t):
        return mul(node, t[0])

    return _unary("exp", a, np.exp, vjp, tangent)


def log(a) -> Node:
    def vjp(g, node, need):
        return (g / node.parents[0].value,)

    def tangent(node, t):
        return div(t[0], node.parents[0])

    return _unary("log", a, np.log, vjp, tangent)


# -- linear algebra and reductions -------------------------------------------

def matmul(a, b) -> Node:
    def vjp(g, node, need):
        pa, pb = node.parents
        av, bv = pa.value, pb.value
        ga = gb = None
        if need[0]:
            ga = np.outer(g, bv) if bv.ndim == 1 else g @ bv.T
        if need[1]:
            if bv.ndim == 1:
                gb = av.T @ g
            elif av.ndim == 1:
                gb = np.outer(av, g)
            else:
                gb = av.T @ g
        return ga, gb

    def tangent(node, t):
        pa, pb = node.parents
        return _tsum(None if t[0] is None else matmul(t[0], pb),
                     None if t[1] is None else matmul(pa, t[1]))

    return _binary("matmul", a, b, np.matmul, vjp, tangent)


def transpose(a) -> Node:
    return _unary("transpose", a, np.transpose,
                  lambda g, node, need: (g.T,),
                  lambda node, t: transpose(t[0]))


def sum(a, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    def f(v):
        return np.sum(v, axis=axis)

    def vjp(g, node, need):
        shape = node.parents[0].shape
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    def tangent(node, t):
        return sum(t[0], axis=axis)

    return _unary("sum", a, f, vjp, tangent)


def mean(a, axis=None) -> Node:
    a = as_node(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def take(a, idx, axis=-1) -> Node:
    idx = np.asarray(idx, dtype=np.intp)

    def f(v):
        return np.take(v, idx, axis=axis)

    def vjp(g, node, need):
        shape = node.parents[0].shape
        out = np.zeros(shape)
        ax = axis % len(shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (out,)

    def tangent(node, t):
        return take(t[0], idx, axis=axis)

    return _unary("take", a, f, vjp, tangent)


def reshape(a, shape) -> Node:
    shape = tuple(shape)

    def f(v):
        return np.reshape(v, shape)

    def vjp(g, node, need):
        return (np.reshape(g, node.parents[0].shape),)

    def tangent(node, t):
        return reshape(t[0], shape)

    return _unary("reshape", a, f, vjp, tangent)


def concat(nodes: Iterable, axis=-1) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def f(*vals):
        return np.concatenate(vals, axis=axis)

    def vjp(g, node, need):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if k else None for p, k in zip(parts, need))

    def tangent(node, t):
        filled = [ti if ti is not None else const(np.zeros(p.shape))
                  for ti, p in zip(t, node.parents)]
        return concat(filled, axis=axis)

    return Node("concat", nodes, f(*[n.value for n in nodes]), fn=f, vjp=vjp, tangent=tangent)


# -- graph traversal ----------------------------------------------------------

def _reachable(output: Node) -> list[Node]:
    """All ancestors of ``output`` (inclusive) in ascending id order."""
    seen = {output.id: output}
    stack = [output]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.id not in seen:
                seen[p.id] = p
                stack.append(p)
    return [seen[i] for i in sorted(seen)]


def grad(output: Node, wrt: list[Node]) -> list[np.ndarray]:
    """Reverse-mode gradient of a scalar ``output`` with respect to ``wrt``.

    Leaves the output does not depend on receive zeros.
    """
    if output.size != 1:
        raise ValueError(f"gradient root must be scalar, got shape {output.shape}")
    order = _reachable(output)
    targets = {n.id for n in wrt}
    needed = set()
    for node in order:
        if node.id in targets or any(p.id in needed for p in node.parents):
            needed.add(node.id)
    grads = {output.id: np.ones_like(output.value)}
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None or not node.parents:
            continue
        if node.id not in targets:
            del grads[node.id]
        mask = [p.id in needed for p in node.parents]
        if not any(mask):
            continue
        pgs = node.vjp(g, node, mask)
        for p, pg in zip(node.parents, pgs):
            if pg is None:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return [np.asarray(grads.get(n.id, np.zeros_like(n.value)), dtype=np.float64).reshape(n.shape)
            for n in wrt]


def jvp(output: Node, wrt: Node, tangent) -> Node:
    """Directional derivative of ``output`` along ``tangent`` at leaf ``wrt``.

    The result is built from graph nodes, so it can be differentiated again.
    """
    seed = as_node(np.broadcast_to(np.asarray(tangent, dtype=np.float64), wrt.shape).copy())
    tangents = {wrt.id: seed}
    for node in _reachable(output):
        if node.id in tangents or not node.parents:
            continue
        ts = [tangents.get(p.id) for p in node.parents]
        if all(t is None for t in ts):
            continue
        out = node.tangent(node, ts)
        if out is not None:
            tangents[node.id] = out
    t_out = tangents.get(output.id)
    return t_out if t_out is not None else const(np.zeros(output.shape))


def input_derivative(output: Node, inputs: Node, index: int, order: int = 1) -> Node:
    """Pure derivative ``d^order output / d inputs[..., index]^order``.

    Rows of ``inputs`` are independent points, so one tangent seed along column
    ``index`` yields the pointwise derivative for every row at once.
    """
    if order not in (1, 2):
        raise NotImplementedError(f"input derivatives of order {order} are not supported")
    seed = np.zeros(inputs.shape)
    seed[..., index] = 1.0
    out = output
    for _ in range(order):
        out = jvp(out, inputs, seed)
    return out


def evaluate(output: Node, params: Mapping[str, object] | None = None,
             inputs: Mapping[str, object] | None = None) -> np.ndarray:
    """Replay the graph of ``output`` with new leaf bindings.

    Every ``param`` and ``input`` leaf must be bound by name; constants keep
    their recorded values.
    """
    params = params or {}
    inputs = inputs or {}
    values = {}
    for node in _reachable(output):
        if node.op == "param" or node.op == "input":
            table = params if node.op == "param" else inputs
            if node.name not in table:
                raise UnboundLeafError(f"unbound {node.op} leaf {node.name!r}")
            values[node.id] = np.asarray(table[node.name], dtype=np.float64)
        elif node.op == "const":
            values[node.id] = node.value
        else:
            values[node.id] = np.asarray(node.fn(*[values[p.id] for p in node.parents]),
                                         dtype=np.float64)
    return values[output.id]


# -- parameter vectors ---------------------------------------------------------

class ParamVector:
    """Flat parameter (or gradient) vector split into named, ordered blocks.

    Block names are dotted paths such as ``trunk.block0.W1`` or
    ``adapter1.layer0.D``; :meth:`group` selects by prefix.
    """

    def __init__(self, blocks: Mapping[str, object]):
        self.blocks = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in blocks.items()}

    @property
    def names(self) -> list[str]:
        return list(self.blocks)

    @property
    def total_len(self) -> int:
        return int(np.sum([v.size for v in self.blocks.values()], dtype=int))

    def flat(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate(list(self.blocks.values()))

    def like(self, vec) -> "ParamVector":
        """A vector with this block layout holding the entries of ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.total_len:
            raise ValueError(f"length {vec.size} does not match layout {self.total_len}")
        out, start = {}, 0
        for k, v in self.blocks.items():
            out[k] = vec[start:start + v.size]
            start += v.size
        return ParamVector(out)

    def select(self, names_or_prefixes: Iterable[str]) -> list[str]:
        """Block names matching any of the given names or dotted prefixes."""
        chosen = []
        for key in names_or_prefixes:
            hits = [n for n in self.blocks if n == key or n.startswith(key if key.endswith(".") else key + ".")]
            if not hits:
                raise KeyError(f"unknown parameter block {key!r}")
            chosen.extend(h for h in hits if h not in chosen)
        return [n for n in self.blocks if n in chosen]

    def group(self, *keys: str) -> np.ndarray:
        names = self.select(keys)
        if not names:
            return np.zeros(0)
        return np.concatenate([self.blocks[n] for n in names])

    def subset(self, names: Iterable[str]) -> "ParamVector":
        return ParamVector({n: self.blocks[n] for n in names})

    def replace(self, other: "ParamVector") -> "ParamVector":
        """Copy with the blocks of ``other`` substituted."""
        out = dict(self.blocks)
        for k, v in other.blocks.items():
            if k not in out:
                raise KeyError(f"unknown parameter block {k!r}")
            out[k] = v
        return ParamVector(out)

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def dot(self, other: "ParamVector") -> float:
        return float(self.flat() @ other.flat())

    def _check(self, other):
        if list(self.blocks) != list(other.blocks) or any(
                a.size != b.size for a, b in zip(self.blocks.values(), other.blocks.values())):
            raise ValueError("parameter vectors have different block layouts")

    def __add__(self, other):
        self._check(other)
        return ParamVector({k: v + other.blocks[k] for k, v in self.blocks.items()})

    def __sub__(self, other):
        self._check(other)
        return ParamVector({k: v - other.blocks[k] for k, v in self.blocks.items()})

    def __mul__(self, s):
        return ParamVector({k: v * s for k, v in self.blocks.items()})

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __len__(self):
        return self.total_len

    def __repr__(self):
        return f"ParamVector({len(self.blocks)} blocks, total_len={self.total_len})"

    @classmethod
    def zeros_like(cls, other: "ParamVector") -> "ParamVector":
        return cls({k: np.zeros_like(v) for k, v in other.blocks.items()})


def grad_params(loss: Node, leaves: Mapping[str, Node]) -> ParamVector:
    """Gradient of a scalar loss over every named parameter leaf."""
    names = list(leaves)
    gs = grad(loss, [leaves[n] for n in names])
    return ParamVector(dict(zip(names, gs)))


def sum_nodes(nodes: Iterable[Node]) -> Node:
    nodes = list(nodes)
    total = nodes[0]
    for n in nodes[1:]:
        total = add(total, n)
    return total
