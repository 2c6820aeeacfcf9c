"""Compile graph roots to a single-assignment tape and evaluate it.

Slot layout of a :class:`Program`: input variables first (in the order given
to :func:`compile`), then constants, then one slot per instruction. Shared
subexpressions are evaluated once because the graph is hash-consed.

Evaluation is vectorised over rows with numpy; every kernel is elementwise,
so a batch gives bit-identical results to evaluating its rows one at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from psens import _kernels
from psens.expr import ExprGraph, NodeId, NodeKind


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class Instruction:
    op: str
    args: tuple[int, ...]
    out: int
    exponent: float | None = None


@dataclass(frozen=True)
class EvalOutcome:
    values: tuple[float, ...]
    defined: tuple[bool, ...]

    @property
    def all_defined(self) -> bool:
        return all(self.defined)


@dataclass(frozen=True)
class Program:
    instructions: tuple[Instruction, ...]
    slot_count: int
    input_names: tuple[str, ...]
    output_labels: tuple[str, ...]
    output_slots: tuple[int, ...]
    constants: tuple[tuple[int, float], ...]
    _code: list = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        code = []
        for ins in self.instructions:
            if ins.op == "pow":
                k = ins.exponent
                code.append((lambda x, k=k: _kernels.k_pow(x, k), ins.args[0], -1, ins.out))
            elif len(ins.args) == 2:
                code.append((_kernels.BINARY[ins.op], ins.args[0], ins.args[1], ins.out))
            else:
                code.append((_kernels.UNARY[ins.op], ins.args[0], -1, ins.out))
        object.__setattr__(self, "_code", code)

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)

    @property
    def n_outputs(self) -> int:
        return len(self.output_labels)

    def run_columns(self, columns: Sequence, n_rows: int | None = None) -> np.ndarray:
        """Evaluate on column-wise bindings; returns ``(n_outputs, n_rows)``.

        Each column is a scalar or a 1-D array; all non-scalar columns must
        share one length. Undefined results come back as NaN or +-inf.
        """
        if len(columns) != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} input columns, got {len(columns)}")
        slots: list = [None] * self.slot_count
        n = 1 if n_rows is None else n_rows
        for i, col in enumerate(columns):
            arr = np.atleast_1d(np.asarray(col, dtype=np.float64))
            if arr.ndim != 1:
                raise ValueError(f"input column {i} must be 1-D")
            if arr.shape[0] != 1:
                if n not in (1, arr.shape[0]):
                    raise ValueError("input columns have mismatched lengths")
                n = arr.shape[0]
            slots[i] = arr
        for slot, value in self.constants:
            slots[slot] = np.array([value])
        with np.errstate(all="ignore"):
            for fn, a, b, out in self._code:
                slots[out] = fn(slots[a]) if b < 0 else fn(slots[a], slots[b])
        result = np.empty((self.n_outputs, n))
        for k, s in enumerate(self.output_slots):
            result[k] = slots[s]
        return result

    def dump(self) -> str:
        """Human-readable listing, one ``slot ← op(args)`` line per entry."""
        lines = [f"s{i} ← input {name}" for i, name in enumerate(self.input_names)]
        lines += [f"s{slot} ← const {value!r}" for slot, value in self.constants]
        for ins in self.instructions:
            args = ", ".join(f"s{a}" for a in ins.args)
            if ins.op == "pow":
                args += f", {ins.exponent!r}"
            lines.append(f"s{ins.out} ← {ins.op}({args})")
        lines += [f"out {label} = s{slot}" for label, slot in zip(self.output_labels, self.output_slots)]
        return "\n".join(lines) + "\n"


def _labeled(roots) -> list[tuple[str, NodeId]]:
    if isinstance(roots, Mapping):
        return [(str(k), v) for k, v in roots.items()]
    out = []
    for i, r in enumerate(roots):
        if isinstance(r, NodeId):
            out.append((f"out{i}", r))
        else:
            label, node = r
            out.append((str(label), node))
    return out


def compile(g: ExprGraph, roots, input_vars: Sequence[str]) -> Program:
    """Compile ``roots`` (mapping or list of (label, NodeId)) into a Program.

    Every variable reachable from the roots must appear in ``input_vars``.
    """
    labeled = _labeled(roots)
    input_vars = tuple(input_vars)
    if len(set(input_vars)) != len(input_vars):
        raise CompileError("duplicate names in input_vars")
    order = g.reachable([node for _, node in labeled])

    slot_of: dict[int, int] = {}
    input_pos = {name: i for i, name in enumerate(input_vars)}
    missing = []
    for i in order:
        n = g.node(g.ref(i))
        if n.kind is NodeKind.VAR:
            if n.payload in input_pos:
                slot_of[i] = input_pos[n.payload]
            else:
                missing.append(n.payload)
    if missing:
        raise CompileError(f"variables missing from input_vars: {', '.join(missing)}")

    next_slot = len(input_vars)
    constants = []
    for i in order:
        n = g.node(g.ref(i))
        if n.kind is NodeKind.CONST:
            slot_of[i] = next_slot
            constants.append((next_slot, n.payload))
            next_slot += 1

    instructions = []
    for i in order:
        n = g.node(g.ref(i))
        if n.kind in (NodeKind.CONST, NodeKind.VAR):
            continue
        args = tuple(slot_of[c] for c in n.children)
        exponent = n.payload if n.kind is NodeKind.POW else None
        instructions.append(Instruction(n.kind.value, args, next_slot, exponent))
        slot_of[i] = next_slot
        next_slot += 1

    return Program(
        instructions=tuple(instructions),
        slot_count=next_slot,
        input_names=input_vars,
        output_labels=tuple(label for label, _ in labeled),
        output_slots=tuple(slot_of[node.index] for _, node in labeled),
        constants=tuple(constants),
    )


def _bindings_row(p: Program, bindings) -> list[float]:
    if isinstance(bindings, Mapping):
        if set(bindings) != set(p.input_names):
            raise ValueError(f"bindings must name exactly {list(p.input_names)}")
        return [float(bindings[name]) for name in p.input_names]
    row = [float(v) for v in bindings]
    if len(row) != p.n_inputs:
        raise ValueError(f"expected {p.n_inputs} bindings, got {len(row)}")
    return row


def _outcomes(values: np.ndarray) -> list[EvalOutcome]:
    defined = np.isfinite(values)
    return [
        EvalOutcome(tuple(values[:, r].tolist()), tuple(defined[:, r].tolist()))
        for r in range(values.shape[1])
    ]


def evaluate(p: Program, bindings) -> EvalOutcome:
    """Evaluate one binding (sequence in input order, or name mapping)."""
    row = _bindings_row(p, bindings)
    return _outcomes(p.run_columns([np.array([v]) for v in row]))[0]


def evaluate_batch(p: Program, rows) -> list[EvalOutcome]:
    rows = np.asarray(rows, dtype=np.float64)
    if len(rows) == 0:
        return []
    if rows.ndim != 2 or rows.shape[1] != p.n_inputs:
        raise ValueError(f"rows must have shape (n, {p.n_inputs})")
    return _outcomes(p.run_columns([rows[:, j] for j in range(p.n_inputs)], n_rows=len(rows)))


def interpret(g: ExprGraph, node: NodeId, bindings: Mapping[str, float]) -> float:
    """Reference evaluator: memoised recursion straight over the graph.

    Used as an oracle for the tape; returns NaN/inf where the tape would
    report the value as undefined.
    """
    memo: dict[int, np.ndarray] = {}

    def ev(i: int) -> np.ndarray:
        if i in memo:
            return memo[i]
        n = g.node(g.ref(i))
        if n.kind is NodeKind.CONST:
            r = np.array([n.payload])
        elif n.kind is NodeKind.VAR:
            r = np.array([float(bindings[n.payload])])
        elif n.kind is NodeKind.POW:
            r = _kernels.k_pow(ev(n.children[0]), n.payload)
        elif len(n.children) == 2:
            r = _kernels.BINARY[n.kind.value](ev(n.children[0]), ev(n.children[1]))
        else:
            r = _kernels.UNARY[n.kind.value](ev(n.children[0]))
        memo[i] = r
        return r

    g.node(node)
    with np.errstate(all="ignore"):
        return float(ev(node.index)[0])
