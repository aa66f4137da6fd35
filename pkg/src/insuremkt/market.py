"""Residual supply, aggregate demand and the feasible price band."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .model_core import ScenarioConfig


class PriceBandError(ValueError):
    pass


@dataclass(frozen=True)
class PriceBand:
    p_N: float
    p_F: float

    def contains(self, p, slack=1e-9):
        return self.p_N - slack <= p <= self.p_F + slack

    def grid(self, n):
        return np.linspace(self.p_N, self.p_F, n)


def uninsured_demand(cfg: ScenarioConfig, p, lo: float = 0.0) -> float:
    """Demand from agents whose valuation exceeds the top of the window: sum m (1 - H(lo + p))."""
    return float(np.sum(cfg.mass * (1.0 - cfg.valuations.cdf(cfg.theta, lo + p))))


def max_insured_demand(cfg: ScenarioConfig, p, lo: float = 0.0) -> float:
    fam = cfg.valuations
    return float(np.sum(cfg.mass * (fam.cdf(cfg.theta, lo + p) - fam.cdf(cfg.theta, lo))))


def residual_supply(cfg: ScenarioConfig, p: float, supply=None, lo: float = 0.0) -> float:
    S = supply or cfg.supply
    return float(S(p)) - uninsured_demand(cfg, p, lo)


def aggregate_demand(cfg: ScenarioConfig, alloc, p: float, lo: float = 0.0) -> float:
    fam = cfg.valuations
    insured = 0.0
    for i, row in enumerate(alloc.rows):
        th = cfg.theta[i]
        insured += cfg.mass[i] * row.insured_mass(lambda b: fam.cdf(th, b))
    return insured + uninsured_demand(cfg, p, lo)


def _p_max(S) -> float:
    p = 1.0
    for _ in range(200):
        if float(S(p)) > 1.0:
            return p
        p *= 2.0
    raise PriceBandError("supply never exceeds total population mass")


def _root(fn, hi, tol, what):
    lo = 0.0
    f_lo, f_hi = fn(lo), fn(hi)
    if f_lo > 0 or f_hi < 0:
        raise PriceBandError(f"bracket for {what} not found within [0, {hi:g}]")
    if f_lo == 0:
        return 0.0
    return brentq(fn, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps)


def price_band(cfg: ScenarioConfig, supply=None, lo: float = 0.0) -> PriceBand:
    """p^N clears the market with no coverage, p^F with full coverage."""
    S = supply or cfg.supply
    tol = cfg.tolerances.bisection_tol
    hi = _p_max(S)
    full = float(np.sum(cfg.mass * (1.0 - cfg.valuations.cdf(cfg.theta, lo))))
    p_N = _root(lambda p: float(S(p)) - uninsured_demand(cfg, p, lo), hi, tol, "p_N")
    p_F = _root(lambda p: float(S(p)) - full, hi, tol, "p_F")
    if not p_N < p_F:
        raise PriceBandError(f"degenerate price band [{p_N}, {p_F}]")
    return PriceBand(p_N, p_F)
