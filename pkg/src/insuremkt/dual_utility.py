"""Dual-utility (rank-dependent) evaluations: certainty equivalents, losses, option values."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model_core import DistortionFn, ValuationFamily
from .quadrature import integrate


@dataclass(frozen=True)
class TruncatedLossSpec:
    """Loss min(b, cap) for an agent of risk type theta."""

    theta: float
    cap: float


def _g_breaks(family, g, theta, lo, hi):
    """Points in (lo, hi) where the integrand 1 - g(H) may have kinks."""
    pts = list(np.asarray(family.kinks(), dtype=float))
    for u in np.asarray(g.kinks(), dtype=float):
        h0 = float(family.cdf(theta, 0.0))
        if h0 < u < 1.0:
            pts.append(float(family.inv(theta, u)))
    return [x for x in pts if lo < x < hi]


def certainty_equivalent(spec: TruncatedLossSpec, g: DistortionFn, family: ValuationFamily, tol: float = 1e-8) -> float:
    """-int_0^cap [1 - g(H_theta(b))] db."""
    cap = float(spec.cap)
    if not 0.0 <= cap <= family.b_max + 1e-12:
        raise ValueError(f"cap {cap} outside [0, b_max]")
    cap = min(cap, family.b_max)
    if cap == 0.0:
        return 0.0
    th = spec.theta
    f = lambda b: 1.0 - g(family.cdf(th, b))
    return -integrate(f, 0.0, cap, _g_breaks(family, g, th, 0.0, cap), tol)


def outside_option(theta: float, p: float, beta: float, g: DistortionFn, family: ValuationFamily,
                   tol: float = 1e-8) -> float:
    """Value of staying uninsured when the service costs beta + p."""
    cap = min(beta + p, family.b_max)
    return certainty_equivalent(TruncatedLossSpec(theta, cap), g, family, tol)


def loss_at(alloc, b):
    """Truthful period-2 loss int_0^min(b, top) (1 - x); flat above the top of the window."""
    return alloc.loss(b)


def menu_option_utility(alloc_of_report, premium: float, true_theta: float, g: DistortionFn,
                        family: ValuationFamily, tol: float = 1e-8) -> float:
    """Ex-ante value of holding a reported type's option: -t - int (1 - x)[1 - g(H)] over the window."""
    return -premium + uncovered_burden(alloc_of_report, true_theta, g, family, tol)


def uncovered_burden(alloc, theta, g, family, tol=1e-8):
    """-int_lo^top (1 - x(b)) [1 - g(H_theta(b))] db."""
    weight = lambda b: 1.0 - g(family.cdf(theta, b))
    return -uncovered_integral(alloc, weight, _g_breaks(family, g, theta, alloc.lo, alloc.top), tol)


def uncovered_integral(alloc, weight, breaks=(), tol=1e-8):
    """int_lo^top (1 - x(b)) weight(b) db, split at the allocation's jump points."""
    lo, top = alloc.lo, alloc.top
    if top <= lo:
        return 0.0
    total = 0.0
    edges = [lo] + [c for c in alloc.jump_points() if lo < c < top] + [top]
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        level = alloc.level(0.5 * (a + b))
        if level >= 1.0:
            continue
        total += (1.0 - level) * integrate(weight, a, b, [x for x in breaks if a < x < b], tol)
    return total
