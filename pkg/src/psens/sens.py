"""Gradient norm and the two partial-sensitivity constructions.

``fractional``: component j is (df/dx_j) / ||grad f||, the normalised gradient.
``gradient``:   component j is d||grad f|| / dx_j, obtained by differentiating
                the symbolic gradient-norm node a second time.

The two agree only in special cases, so neither is exposed under a bare
"partial sensitivity" name.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from psens.diff import GradientMap, gradient
from psens.expr import ExprGraph, NodeId

VARIANTS = ("fractional", "gradient")


@dataclass(frozen=True)
class SensitivityBundle:
    function: NodeId
    grad: GradientMap
    grad_norm: NodeId
    ps_fractional: dict[str, NodeId]
    ps_gradient: dict[str, NodeId]

    def partial_sensitivity(self, variant: str) -> dict[str, NodeId]:
        check_variant(variant)
        return self.ps_fractional if variant == "fractional" else self.ps_gradient


def check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown partial-sensitivity variant {variant!r}; expected one of {VARIANTS}")


def norm_of(g: ExprGraph, grad: GradientMap) -> NodeId:
    """sqrt of the sum of squared entries, summed in entry order."""
    return g.sqrt(g.sum([g.pow(d, 2.0) for d in grad.nodes]))


def gradient_norm(g: ExprGraph, f: NodeId, vars: Sequence[str]) -> NodeId:
    return norm_of(g, gradient(g, f, vars))


def _fractional(g, grad: GradientMap, phi: NodeId) -> dict[str, NodeId]:
    return {name: g.div(d, phi) for name, d in grad}


def partial_sensitivity_fractional(g: ExprGraph, f: NodeId, vars: Sequence[str]) -> dict[str, NodeId]:
    grad = gradient(g, f, vars)
    return _fractional(g, grad, norm_of(g, grad))


def partial_sensitivity_gradient(g: ExprGraph, f: NodeId, vars: Sequence[str]) -> dict[str, NodeId]:
    return dict(gradient(g, gradient_norm(g, f, vars), vars).entries)


def sensitivity_bundle(g: ExprGraph, f: NodeId, vars: Sequence[str], variants: Sequence[str] = VARIANTS) -> SensitivityBundle:
    """Build gradient, norm and the requested variants sharing one graph.

    Variants left out of ``variants`` are returned as empty dicts, which keeps
    the second-order construction off the graph when it is not needed.
    """
    for v in variants:
        check_variant(v)
    grad = gradient(g, f, vars)
    phi = norm_of(g, grad)
    frac = _fractional(g, grad, phi) if "fractional" in variants else {}
    grad2 = dict(gradient(g, phi, vars).entries) if "gradient" in variants else {}
    return SensitivityBundle(f, grad, phi, frac, grad2)
