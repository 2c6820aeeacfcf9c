"""Immutable, hash-consed scalar expression DAG.

Nodes are appended to an :class:`ExprGraph` and never change afterwards.
Children are always created before their parents, so node ids in increasing
order form a topological order of the graph.
"""

from __future__ import annotations

import enum
import itertools
import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from psens import _kernels


class GraphError(ValueError):
    """Invalid graph construction (bad arity, foreign node, bad name...)."""


class NodeKind(enum.Enum):
    CONST = "const"
    VAR = "var"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    NEG = "neg"
    POW = "pow"
    EXP = "exp"
    LN = "ln"
    SQRT = "sqrt"
    SIGMOID = "sigmoid"


ARITY = {
    NodeKind.CONST: 0,
    NodeKind.VAR: 0,
    NodeKind.ADD: 2,
    NodeKind.SUB: 2,
    NodeKind.MUL: 2,
    NodeKind.DIV: 2,
    NodeKind.NEG: 1,
    NodeKind.POW: 1,
    NodeKind.EXP: 1,
    NodeKind.LN: 1,
    NodeKind.SQRT: 1,
    NodeKind.SIGMOID: 1,
}

_COMMUTATIVE = (NodeKind.ADD, NodeKind.MUL)
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_graph_uids = itertools.count()


@dataclass(frozen=True, order=True, slots=True)
class NodeId:
    """Handle to a node; only meaningful for the graph that issued it."""

    graph: int
    index: int

    def __index__(self) -> int:
        return self.index

    def __repr__(self) -> str:
        return f"NodeId({self.index})"


@dataclass(frozen=True, slots=True)
class Node:
    kind: NodeKind
    payload: float | str | None
    children: tuple[int, ...]

    @property
    def key(self):
        return (self.kind, self.payload, self.children)


def is_identifier(name: str) -> bool:
    return isinstance(name, str) and _IDENT_RE.match(name) is not None


class ExprGraph:
    """Append-only store of interned expression nodes.

    With ``simplify=False`` only hash-consing is performed; the local
    algebraic rewrites and constant folding of :meth:`apply` are skipped.
    """

    def __init__(self, simplify: bool = True):
        self.simplify = simplify
        self.uid = next(_graph_uids)
        self._nodes: list[Node] = []
        self._interner: dict[tuple, int] = {}
        self._variables: dict[str, int] = {}
        self._frozen = False

    # -- inspection -------------------------------------------------------

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, node) -> bool:
        return isinstance(node, NodeId) and node.graph == self.uid and node.index < len(self._nodes)

    def node(self, node: NodeId) -> Node:
        return self._nodes[self._check(node)]

    def kind(self, node: NodeId) -> NodeKind:
        return self.node(node).kind

    def children(self, node: NodeId) -> tuple[NodeId, ...]:
        return tuple(self.ref(c) for c in self.node(node).children)

    def ref(self, index: int) -> NodeId:
        if not 0 <= index < len(self._nodes):
            raise GraphError(f"no node with index {index}")
        return NodeId(self.uid, index)

    def nodes(self) -> Iterable[tuple[NodeId, Node]]:
        for i, n in enumerate(self._nodes):
            yield NodeId(self.uid, i), n

    @property
    def variables(self) -> dict[str, NodeId]:
        return {name: NodeId(self.uid, i) for name, i in self._variables.items()}

    def lookup_variable(self, name: str) -> NodeId:
        try:
            return NodeId(self.uid, self._variables[name])
        except KeyError:
            raise GraphError(f"variable {name!r} is not registered") from None

    def const_value(self, node: NodeId) -> float | None:
        n = self.node(node)
        return n.payload if n.kind is NodeKind.CONST else None

    def reachable(self, roots: Iterable[NodeId]) -> list[int]:
        """Indices of all nodes reachable from ``roots``, ascending."""
        seen: set[int] = set()
        stack = [self._check(r) for r in roots]
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            stack.extend(self._nodes[i].children)
        return sorted(seen)

    def freeze(self) -> None:
        """Forbid further construction; the graph is then safe to share."""
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return self._frozen

    # -- construction -----------------------------------------------------

    def constant(self, value: float) -> NodeId:
        value = float(value)
        if not math.isfinite(value):
            raise GraphError(f"constant must be finite, got {value!r}")
        # -0.0 and 0.0 intern to the same node
        return self._intern(Node(NodeKind.CONST, value + 0.0, ()))

    def variable(self, name: str) -> NodeId:
        if not is_identifier(name):
            raise GraphError(f"malformed variable name {name!r}")
        if name in self._variables:
            return NodeId(self.uid, self._variables[name])
        node = self._intern(Node(NodeKind.VAR, name, ()))
        self._variables[name] = node.index
        return node

    def apply(self, kind: NodeKind, children: Sequence[NodeId], exponent: float | None = None) -> NodeId:
        """Intern ``kind(children)`` after local simplification.

        ``exponent`` is required for (and only accepted by) ``NodeKind.POW``.
        """
        kind = NodeKind(kind)
        if kind in (NodeKind.CONST, NodeKind.VAR):
            raise GraphError("use constant() / variable() for leaf nodes")
        if len(children) != ARITY[kind]:
            raise GraphError(f"{kind.value} takes {ARITY[kind]} children, got {len(children)}")
        idx = tuple(self._check(c) for c in children)
        if kind is NodeKind.POW:
            if exponent is None:
                raise GraphError("pow requires a constant exponent")
            exponent = float(exponent)
            if not math.isfinite(exponent):
                raise GraphError(f"pow exponent must be finite, got {exponent!r}")
            exponent += 0.0
        elif exponent is not None:
            raise GraphError(f"{kind.value} takes no exponent")

        if self.simplify:
            simplified = self._simplify(kind, idx, exponent)
            if simplified is not None:
                return simplified
            if kind in _COMMUTATIVE:
                idx = tuple(sorted(idx))
        return self._intern(Node(kind, exponent, idx))

    # small builders used throughout the package
    def add(self, a, b):
        return self.apply(NodeKind.ADD, (a, b))

    def sub(self, a, b):
        return self.apply(NodeKind.SUB, (a, b))

    def mul(self, a, b):
        return self.apply(NodeKind.MUL, (a, b))

    def div(self, a, b):
        return self.apply(NodeKind.DIV, (a, b))

    def neg(self, a):
        return self.apply(NodeKind.NEG, (a,))

    def pow(self, a, k: float):
        return self.apply(NodeKind.POW, (a,), exponent=k)

    def exp(self, a):
        return self.apply(NodeKind.EXP, (a,))

    def ln(self, a):
        return self.apply(NodeKind.LN, (a,))

    def sqrt(self, a):
        return self.apply(NodeKind.SQRT, (a,))

    def sigmoid(self, a):
        return self.apply(NodeKind.SIGMOID, (a,))

    def sum(self, terms: Sequence[NodeId]) -> NodeId:
        """Left-to-right sum; the empty sum is the constant 0."""
        if not terms:
            return self.constant(0.0)
        acc = terms[0]
        for t in terms[1:]:
            acc = self.add(acc, t)
        return acc

    # -- internals --------------------------------------------------------

    def _check(self, node) -> int:
        if not isinstance(node, NodeId):
            raise GraphError(f"expected a NodeId, got {type(node).__name__}")
        if node.graph != self.uid or node.index >= len(self._nodes):
            raise GraphError(f"{node!r} does not belong to this graph")
        return node.index

    def _intern(self, node: Node) -> NodeId:
        key = node.key
        found = self._interner.get(key)
        if found is not None:
            return NodeId(self.uid, found)
        if self._frozen:
            raise GraphError("graph is frozen")
        index = len(self._nodes)
        self._nodes.append(node)
        self._interner[key] = index
        return NodeId(self.uid, index)

    def _cval(self, index: int) -> float | None:
        n = self._nodes[index]
        return n.payload if n.kind is NodeKind.CONST else None

    def _simplify(self, kind, idx, exponent) -> NodeId | None:
        consts = [self._cval(i) for i in idx]
        if all(c is not None for c in consts):
            folded = fold(kind, consts, exponent)
            if folded is not None:
                return self.constant(folded)

        ref = lambda i: NodeId(self.uid, i)  # noqa: E731
        if kind is NodeKind.ADD:
            a, b = idx
            if consts[1] == 0.0:
                return ref(a)
            if consts[0] == 0.0:
                return ref(b)
        elif kind is NodeKind.SUB:
            a, b = idx
            if consts[1] == 0.0:
                return ref(a)
            if a == b:
                return self.constant(0.0)
        elif kind is NodeKind.MUL:
            a, b = idx
            if consts[0] == 0.0 or consts[1] == 0.0:
                return self.constant(0.0)
            if consts[1] == 1.0:
                return ref(a)
            if consts[0] == 1.0:
                return ref(b)
        elif kind is NodeKind.DIV:
            if consts[1] == 1.0:
                return ref(idx[0])
        elif kind is NodeKind.POW:
            if exponent == 1.0:
                return ref(idx[0])
            if exponent == 0.0:
                return self.constant(1.0)
        elif kind is NodeKind.NEG:
            inner = self._nodes[idx[0]]
            if inner.kind is NodeKind.NEG:
                return ref(inner.children[0])
        return None


def fold(kind: NodeKind, values: Sequence[float], exponent: float | None = None) -> float | None:
    """Evaluate ``kind`` on constant operands; None if the result is not finite."""
    args = [np.array([v], dtype=np.float64) for v in values]
    with np.errstate(all="ignore"):
        if kind is NodeKind.POW:
            out = _kernels.k_pow(args[0], exponent)
        elif len(args) == 2:
            out = _kernels.BINARY[kind.value](*args)
        else:
            out = _kernels.UNARY[kind.value](args[0])
    v = float(out[0])
    return v if math.isfinite(v) else None
