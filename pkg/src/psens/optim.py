"""Box-constrained global maximisation of a compiled scalar function.

The search evaluates a full lattice over the box (corners included), then
refines the best lattice points by projected gradient ascent with
backtracking. The global L2-sensitivity of ``f`` over a box is the maximum of
its gradient norm there.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from psens import tape
from psens.diff import gradient
from psens.expr import ExprGraph, NodeId
from psens.sens import norm_of


@dataclass(frozen=True)
class BoxDomain:
    names: tuple[str, ...]
    lows: tuple[float, ...]
    highs: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.names) == len(self.lows) == len(self.highs)):
            raise ValueError("names, lows and highs must have equal length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate variable in box")
        for name, lo, hi in zip(self.names, self.lows, self.highs):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"bounds for {name!r} must be finite")
            if lo > hi:
                raise ValueError(f"empty interval for {name!r}: [{lo}, {hi}]")

    @classmethod
    def from_mapping(cls, ranges: Mapping[str, tuple[float, float]]) -> "BoxDomain":
        names = tuple(ranges)
        return cls(
            names,
            tuple(float(ranges[n][0]) for n in names),
            tuple(float(ranges[n][1]) for n in names),
        )

    @property
    def dim(self) -> int:
        return len(self.names)

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(x, self.lows), self.highs)

    def contains(self, point: Sequence[float]) -> bool:
        return all(lo <= v <= hi for v, lo, hi in zip(point, self.lows, self.highs))

    def lattice_axes(self, n: int) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi in zip(self.lows, self.highs)]


@dataclass(frozen=True)
class MaxConfig:
    grid_per_dim: int = 33
    top_k: int = 8
    ascent_steps: int = 200
    step_init: float | None = None  # None: 0.1 * smallest positive box width
    tol: float = 1e-10


@dataclass(frozen=True)
class MaxResult:
    argmax: dict[str, float]
    value: float
    evaluations: int
    seeds_used: int


def _value(p: tape.Program, x) -> float:
    v = float(p.run_columns([np.array([c]) for c in x])[0, 0])
    return v if math.isfinite(v) else -math.inf


def maximize(
    objective: tape.Program,
    objective_grad: tape.Program,
    box: BoxDomain,
    cfg: MaxConfig = MaxConfig(),
) -> MaxResult:
    """Maximise ``objective`` over ``box``; undefined values count as -inf."""
    if objective.n_outputs != 1:
        raise ValueError("objective must have exactly one output")
    if objective.input_names != box.names or objective_grad.input_names != box.names:
        raise ValueError(f"program inputs must be ordered as the box variables {box.names}")
    if objective_grad.n_outputs != box.dim:
        raise ValueError("objective_grad must have one output per box variable")
    if cfg.grid_per_dim < 2:
        raise ValueError("grid_per_dim must be >= 2")

    d = box.dim
    axes = box.lattice_axes(cfg.grid_per_dim)
    mesh = np.meshgrid(*axes, indexing="ij")
    cols = [m.ravel() for m in mesh]
    n_lattice = cols[0].size if d else 1
    vals = objective.run_columns(cols, n_rows=n_lattice)[0]
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    evaluations = n_lattice
    if not np.isfinite(vals).any():
        raise ValueError("objective is undefined at every lattice point")

    # stable sort: equal values keep lattice order
    ranked = np.argsort(-vals, kind="stable")
    seeds = ranked[: min(cfg.top_k, n_lattice)]
    best_x = np.array([c[seeds[0]] for c in cols])
    best_v = float(vals[seeds[0]])

    widths = [hi - lo for lo, hi in zip(box.lows, box.highs) if hi > lo]
    step0 = cfg.step_init if cfg.step_init is not None else (0.1 * min(widths) if widths else 0.0)

    for s in seeds:
        if not np.isfinite(vals[s]):
            continue
        x = np.array([c[s] for c in cols])
        fx = float(vals[s])
        step = step0
        for _ in range(cfg.ascent_steps):
            if step < cfg.tol:
                break
            grad = objective_grad.run_columns([np.array([c]) for c in x])[:, 0]
            evaluations += 1
            gnorm = float(np.sqrt(np.sum(grad * grad)))
            if not math.isfinite(gnorm) or gnorm == 0.0:
                break
            cand = box.clip(x + step * grad / gnorm)
            fc = _value(objective, cand)
            evaluations += 1
            if fc > fx:
                x, fx = cand, fc
            else:
                step *= 0.5
        if fx > best_v:
            best_x, best_v = x, fx

    # re-check: reported value is the objective at the reported point
    checked = _value(objective, best_x)
    if not box.contains(best_x) or checked != best_v:
        raise RuntimeError(f"inconsistent maximiser: f({best_x}) = {checked}, recorded {best_v}")
    return MaxResult(
        argmax={n: float(v) for n, v in zip(box.names, best_x)},
        value=best_v,
        evaluations=evaluations,
        seeds_used=len(seeds),
    )


def global_sensitivity(
    g: ExprGraph,
    f: NodeId,
    vars: Sequence[str],
    box: BoxDomain,
    cfg: MaxConfig = MaxConfig(),
) -> MaxResult:
    """Maximum of ||grad f|| over ``box`` (the global L2-sensitivity of f)."""
    if tuple(vars) != box.names:
        raise ValueError("vars must match the box variable order")
    grad = gradient(g, f, vars)
    phi = norm_of(g, grad)
    dphi = gradient(g, phi, vars)
    objective = tape.compile(g, [("grad_norm", phi)], vars)
    objective_grad = tape.compile(g, [(f"d_{n}", node) for n, node in dphi], vars)
    return maximize(objective, objective_grad, box, cfg)


def lattice_points(box: BoxDomain, n: int):
    """Lattice points in row-major order (first variable varies slowest)."""
    return itertools.product(*box.lattice_axes(n))
