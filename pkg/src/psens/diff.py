"""Reverse-mode symbolic differentiation on an :class:`ExprGraph`.

Derivatives are emitted as ordinary graph nodes, so the output of
:func:`gradient` can itself be differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from psens.expr import ExprGraph, NodeId, NodeKind


@dataclass(frozen=True)
class GradientMap:
    """Symbolic partial derivatives of ``function``, in request order."""

    function: NodeId
    entries: dict[str, NodeId]

    def __getitem__(self, name: str) -> NodeId:
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries.items())

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return list(self.entries)

    @property
    def nodes(self) -> list[NodeId]:
        return list(self.entries.values())


def adjoints(g: ExprGraph, f: NodeId) -> dict[int, NodeId]:
    """Adjoint node of every node in the sub-DAG of ``f`` that receives one.

    Nodes are visited once each in decreasing id order; because children
    always have smaller ids, a node's adjoint is complete when it is visited.
    """
    adj: dict[int, NodeId] = {f.index: g.constant(1.0)}

    def push(child: int, contrib: NodeId) -> None:
        prev = adj.get(child)
        adj[child] = contrib if prev is None else g.add(prev, contrib)

    for i in reversed(g.reachable([f])):
        a = adj.get(i)
        if a is None:
            continue
        out = g.ref(i)
        node = g.node(out)
        kind = node.kind
        ch = node.children
        if kind in (NodeKind.CONST, NodeKind.VAR):
            continue
        if kind is NodeKind.ADD:
            push(ch[0], a)
            push(ch[1], a)
        elif kind is NodeKind.SUB:
            push(ch[0], a)
            push(ch[1], g.neg(a))
        elif kind is NodeKind.MUL:
            x, y = g.ref(ch[0]), g.ref(ch[1])
            push(ch[0], g.mul(a, y))
            push(ch[1], g.mul(a, x))
        elif kind is NodeKind.DIV:
            y = g.ref(ch[1])
            push(ch[0], g.div(a, y))
            # d(x/y)/dy = -(x/y)/y
            push(ch[1], g.neg(g.div(g.mul(a, out), y)))
        elif kind is NodeKind.NEG:
            push(ch[0], g.neg(a))
        elif kind is NodeKind.POW:
            k = node.payload
            x = g.ref(ch[0])
            push(ch[0], g.mul(a, g.mul(g.constant(k), g.pow(x, k - 1.0))))
        elif kind is NodeKind.EXP:
            push(ch[0], g.mul(a, out))
        elif kind is NodeKind.LN:
            push(ch[0], g.div(a, g.ref(ch[0])))
        elif kind is NodeKind.SQRT:
            push(ch[0], g.div(a, g.mul(g.constant(2.0), out)))
        elif kind is NodeKind.SIGMOID:
            slope = g.mul(out, g.sub(g.constant(1.0), out))
            push(ch[0], g.mul(a, slope))
        else:  # pragma: no cover - exhaustive over NodeKind
            raise AssertionError(kind)
    return adj


def gradient(g: ExprGraph, f: NodeId, vars: Sequence[str]) -> GradientMap:
    """Symbolic gradient of ``f`` with respect to the named variables.

    Variables that ``f`` does not depend on map to the constant 0.
    """
    var_ids = [g.lookup_variable(name) for name in vars]
    g.node(f)  # validates ownership
    adj = adjoints(g, f)
    zero = None
    entries = {}
    for name, v in zip(vars, var_ids):
        d = adj.get(v.index)
        if d is None:
            zero = zero or g.constant(0.0)
            d = zero
        entries[name] = d
    return GradientMap(f, entries)
