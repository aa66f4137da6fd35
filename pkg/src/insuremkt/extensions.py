"""Variants on the first-stage engine: a redistributive planner, Nash bargaining
with a capacity-constrained provider, and two service tiers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .first_stage import (
    FirstStageSolution,
    assemble,
    build_problem,
    grid_responses,
    refined_responses,
    solve_first_stage,
    solve_lambda,
)
from .market import PriceBand, PriceBandError, price_band, uninsured_demand
from .model_core import ScenarioConfig, ScenarioError, ShiftedFamily, SupplyCurve, supply_from_dict
from .quadrature import integrate
from .dual_utility import outside_option
from .screening import density_breaks, information_rent, value_density


# ---------------------------------------------------------------------------
# planner

@dataclass(frozen=True)
class PlannerConfig:
    delta: float = 1.0
    omega: object = 0.0          # constant or tuple of (theta, weight) knots
    U_bar: float | None = None   # None means the lowest type's outside option

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if np.any(np.asarray(self.omega_knots()[1]) < 0):
            raise ValueError("welfare weights must be nonnegative")

    def omega_knots(self):
        if np.ndim(self.omega) == 0:
            return np.array([0.0, 1.0]), np.array([float(self.omega)] * 2)
        arr = np.asarray(self.omega, dtype=float)
        return arr[:, 0], arr[:, 1]

    def omega_at(self, theta):
        if np.ndim(self.omega) == 0:
            return np.full(np.shape(theta), float(self.omega))
        xs, ys = self.omega_knots()
        return np.interp(theta, xs, ys)

    @classmethod
    def from_dict(cls, d):
        omega = d.get("omega", 0.0)
        if not np.ndim(omega) == 0:
            omega = tuple(tuple(float(x) for x in pair) for pair in omega)
        U_bar = d.get("U_bar")
        return cls(float(d.get("delta", 1.0)), omega, None if U_bar is None else float(U_bar))


def omega_tail(cfg: ScenarioConfig, pc: PlannerConfig):
    """Mean welfare weight over the atoms strictly above each atom (zero for the top atom)."""
    w = cfg.mass * pc.omega_at(cfg.theta)
    above_w = np.concatenate([np.cumsum(w[::-1])[::-1][1:], [0.0]])
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(cfg.mass_above > 0, above_w / cfg.mass_above, 0.0)
    return out


def planner_social_value(cfg: ScenarioConfig, i, b, p, pc: PlannerConfig):
    """V = delta J - Omega I / h."""
    i = np.asarray(i)
    h = cfg.valuations.pdf(cfg.theta[i], b)
    return _planner_density(cfg, pc, p)(i, b) / h


class PlannerDensity:
    """V*h = delta J h - Omega I (picklable)."""

    def __init__(self, cfg, pc, p, lo=0.0):
        self.cfg, self.delta, self.p, self.lo = cfg, pc.delta, p, lo
        self.Om = omega_tail(cfg, pc)

    def __call__(self, rows, b):
        return (self.delta * value_density(self.cfg, rows, b, self.p, self.lo)
                - self.Om[np.asarray(rows)] * information_rent(self.cfg, rows, b))


def _planner_density(cfg, pc, p, lo=0.0):
    return PlannerDensity(cfg, pc, p, lo)


def _lowest_utility(cfg, pc, p):
    """(U(theta_lo), fixed, w_bar). fixed is True when the planner pins U at a constant U_bar.

    Without U_bar the lowest type's utility stays at its outside option, which moves with p.
    """
    u_np = outside_option(cfg.theta[0], p, cfg.beta, cfg.distortion, cfg.valuations, cfg.tolerances.integration_tol)
    w_bar = float(np.sum(cfg.mass * pc.omega_at(cfg.theta)))
    if w_bar > pc.delta and pc.U_bar is not None:
        if pc.U_bar < u_np - 1e-12:
            raise ValueError(f"U_bar={pc.U_bar:.6g} is below the lowest type's outside option {u_np:.6g} at p={p:.6g}")
        return pc.U_bar, True, w_bar
    return u_np, False, w_bar


def _welfare_constant(cfg, pc, p, U0, w_bar):
    g, fam = cfg.distortion, cfg.valuations
    tol = cfg.tolerances.integration_tol
    if cfg.known_type:
        val = 0.0
        for k, (t, m) in enumerate(zip(cfg.theta, cfg.mass)):
            u = outside_option(t, p, cfg.beta, g, fam, tol)
            burden = integrate(lambda b, t=t: 1.0 - g(fam.cdf(t, b)), 0.0, p, density_breaks(cfg, k, 0.0, p), tol)
            val += m * (pc.delta * (-u - burden) + float(pc.omega_at(t)) * u)
        return val
    Om = omega_tail(cfg, pc)
    rent = 0.0
    for i in range(cfg.n_atoms - 1):
        if Om[i] == 0:
            continue
        rent += cfg.mass[i] * Om[i] * integrate(lambda b, i=i: information_rent(cfg, i, b), 0.0, p,
                                                density_breaks(cfg, i, 0.0, p), tol)
    t0 = cfg.theta[0]
    base = integrate(lambda b: 1.0 - g(fam.cdf(t0, b)), 0.0, p, density_breaks(cfg, 0, 0.0, p), tol)
    return rent - pc.delta * base + (w_bar - pc.delta) * U0


def solve_planner(cfg: ScenarioConfig, p: float, pc: PlannerConfig, refine: bool = True) -> FirstStageSolution:
    """First-stage engine with social values; ``profit`` holds welfare W(p)."""
    U0, capped, w_bar = _lowest_utility(cfg, pc, p)
    K = _welfare_constant(cfg, pc, p, U0, w_bar)
    sol = solve_first_stage(cfg, p, refine=refine, density=_planner_density(cfg, pc, p),
                            U_lo=None if cfg.known_type else U0, K=K)
    sol.U_bar_binding = capped
    return sol


def welfare_derivative(sol: FirstStageSolution, cfg: ScenarioConfig, pc: PlannerConfig, supply=None):
    """W'(p) by the envelope theorem; returns (value, regime_ok).

    regime_ok reports whether V is strictly increasing in b for every atom (the simple-deductible regime).
    """
    S = supply or cfg.supply
    p = sol.p
    g, fam = cfg.distortion, cfg.valuations
    idx = np.arange(cfg.n_atoms)
    x_top = sol.top_levels()
    bp = np.full(cfg.n_atoms, p)
    w_top = value_density(cfg, idx, bp, p)
    I_top = information_rent(cfg, idx, bp)
    Om = omega_tail(cfg, pc)
    h_top = fam.pdf(cfg.theta, p)
    covered = np.array([r.insured_mass(lambda b, t=t: fam.cdf(t, b)) for r, t in zip(sol.allocation.rows, cfg.theta)])
    val = float(np.sum(cfg.mass * (pc.delta * x_top * w_top - pc.delta * covered + (1.0 - x_top) * Om * I_top)))
    val -= sol.lambda_star * (float(S.deriv(p)) + float(np.sum(cfg.mass * (1.0 - x_top) * h_top)))
    hi = min(p + cfg.beta, cfg.b_max)
    if cfg.known_type:
        # each type's outside option moves with p: dU = -(1 - g(H(p + beta)))
        dU = -(1.0 - g(fam.cdf(cfg.theta, hi)))
        om = pc.omega_at(cfg.theta)
        val += float(np.sum(cfg.mass * (-pc.delta * (1.0 - g(fam.cdf(cfg.theta, p))) + (om - pc.delta) * dU)))
    else:
        val -= pc.delta * float(1.0 - g(fam.cdf(cfg.theta[0], p)))
        _, capped, w_bar = _lowest_utility(cfg, pc, p)
        if not capped:
            val += (w_bar - pc.delta) * -float(1.0 - g(fam.cdf(cfg.theta[0], hi)))
    bs = np.linspace(0.0, p, 201)[1:]
    dens = _planner_density(cfg, pc, p)
    regime_ok = True
    for i in range(cfg.n_atoms):
        V = dens(i, bs) / fam.pdf(cfg.theta[i], bs)
        if np.any(np.diff(V) <= 0):
            regime_ok = False
            break
    return float(val), regime_ok


def welfare_above_benchmark(cfg: ScenarioConfig, pc: PlannerConfig | None = None, n_p: int = 9):
    """W'(p) on a grid of prices from p^U to p^F; a consumer-only planner expects every value negative."""
    from .second_stage import price_taking_benchmark

    pc = pc or PlannerConfig(0.0, 1.0)
    band = price_band(cfg)
    pU = price_taking_benchmark(cfg, band)
    out = []
    for p in np.linspace(pU, band.p_F, n_p):
        dW, _ = welfare_derivative(solve_planner(cfg, float(p), pc), cfg, pc)
        out.append((float(p), dW))
    return pU, out


# ---------------------------------------------------------------------------
# bargaining

@dataclass(frozen=True)
class BargainConfig:
    beta_bargain: float = 0.5
    capacity: tuple | None = None    # None: capacity tied to the supply curve at the agreed price
    provider_mc: float = 0.0
    prices: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.beta_bargain <= 1.0:
            raise ValueError("beta_bargain must lie in [0, 1]")
        if self.provider_mc < 0:
            raise ValueError("provider_mc must be nonnegative")
        if self.capacity is not None and len(self.capacity) == 0:
            raise ValueError("capacity grid must be nonempty")

    @classmethod
    def from_dict(cls, d):
        cap = d.get("capacity", "price_linked")
        cap = None if cap in (None, "price_linked") else tuple(float(x) for x in cap)
        prices = d.get("prices")
        prices = None if prices is None else tuple(float(x) for x in prices)
        return cls(float(d.get("beta_bargain", 0.5)), cap, float(d.get("provider_mc", 0.0)), prices)


@dataclass
class BargainPoint:
    p: float
    S: float
    insurer_profit: float
    provider_profit: float
    nash: float
    multiplier: float
    demand: float
    binding: bool
    slackness: float = 0.0   # multiplier * (demand - S)


@dataclass
class BargainResult:
    agreement: bool
    p: float | None
    S: float | None
    solution: FirstStageSolution | None
    insurer_profit: float | None
    provider_profit: float | None
    points: list = field(default_factory=list)


def capacity_solve(cfg: ScenarioConfig, p: float, S_cap: float, refine: bool = True):
    """Insurer's best menu when referred demand may not exceed S_cap. Returns (solution, binding) or None if infeasible."""
    unins = uninsured_demand(cfg, p)
    if S_cap < unins - 1e-12:
        return None
    prob = build_problem(cfg, p, rs=0.0)
    free = refined_responses(prob, 0.0, "lo") if refine else grid_responses(prob, 0.0, "lo")
    d_free = float(np.sum(prob.weight * free))
    cap_rs = S_cap - unins
    binding = cap_rs < d_free
    prob.rs = max(cap_rs, 0.0) if binding else d_free
    lam = solve_lambda(prob, refine=refine)
    sol = assemble(prob, lam, refine)
    if not binding:
        sol.lambda_star = 0.0
    return sol, binding


def nash_product(pi_i, pi_s, beta):
    if pi_s <= 0 or pi_i < 0:
        return -np.inf
    a = pi_i**beta if beta > 0 else 1.0
    b = pi_s ** (1.0 - beta) if beta < 1 else 1.0
    return a * b


def _bargain_point(cfg, bc, p, S_cap):
    out = capacity_solve(cfg, p, S_cap)
    if out is None:
        return None
    sol, binding = out
    demand = sol.rs + sol.clearing_gap + uninsured_demand(cfg, p)
    pi_s = (p - bc.provider_mc) * demand
    mult = -sol.lambda_star if binding else 0.0
    pt = BargainPoint(p, S_cap, sol.profit, pi_s, nash_product(sol.profit, pi_s, bc.beta_bargain), mult, demand,
                      binding, mult * (demand - S_cap))
    return pt, sol


def solve_bargain(cfg: ScenarioConfig, bc: BargainConfig, prices=None, n_p: int | None = None,
                  workers: int = 1) -> BargainResult:
    """Exhaustive grid search of the Nash product over (p, S)."""
    if prices is None:
        prices = bc.prices
    if prices is None:
        prices = price_band(cfg).grid(n_p or cfg.grids.n_p)
    jobs = []
    for p in prices:
        caps = [float(cfg.supply(p))] if bc.capacity is None else list(bc.capacity)
        jobs += [(float(p), float(S)) for S in caps]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_bargain_point, [cfg] * len(jobs), [bc] * len(jobs), *zip(*jobs)))
    else:
        results = [_bargain_point(cfg, bc, p, S) for p, S in jobs]
    points, best = [], None
    for res in results:
        if res is None:
            continue
        pt, sol = res
        points.append(pt)
        if np.isfinite(pt.nash) and (best is None or pt.nash > best[0].nash):
            best = (pt, sol)
    if best is None:
        return BargainResult(False, None, None, None, None, None, points)
    pt, sol = best
    return BargainResult(True, pt.p, pt.S, sol, pt.insurer_profit, pt.provider_profit, points)


# ---------------------------------------------------------------------------
# tiers

@dataclass(frozen=True)
class TierConfig:
    b_star: float
    supply_1: SupplyCurve
    supply_2: SupplyCurve
    p1: float | None = None
    p2: float | None = None

    @classmethod
    def from_dict(cls, d):
        if "b_star" not in d:
            raise ScenarioError("variants.tiers.b_star: required field missing")
        s1 = supply_from_dict(d["supply_1"], "variants.tiers.supply_1")
        s2 = supply_from_dict(d["supply_2"], "variants.tiers.supply_2")
        p1 = d.get("p1")
        p2 = d.get("p2")
        return cls(float(d["b_star"]), s1, s2, None if p1 is None else float(p1), None if p2 is None else float(p2))


@dataclass
class TierSolution:
    basic: FirstStageSolution
    advanced: FirstStageSolution | None
    band_1: PriceBand
    band_2: PriceBand | None

    @property
    def profit(self):
        return self.basic.profit + (self.advanced.profit if self.advanced is not None else 0.0)

    def total_premiums(self):
        t = np.array(self.basic.menu.premiums, dtype=float)
        if self.advanced is not None:
            t = t + self.advanced.menu.premiums
        return t


def tier_bands(cfg: ScenarioConfig, tc: TierConfig):
    cfg0 = cfg.with_changes(beta=0.0)
    b1 = price_band(cfg0, tc.supply_1)
    b2 = price_band(cfg0, tc.supply_2, lo=tc.b_star) if tc.b_star < cfg.b_max else None
    return b1, b2


def solve_tiers(cfg: ScenarioConfig, tc: TierConfig, p1: float | None = None, p2: float | None = None,
                refine: bool = True, workers: int = 1) -> TierSolution:
    """Two independent first-stage solves: basic service on (0, p1], advanced on (b*, b* + p2]."""
    if not 0.0 < tc.b_star:
        raise ValueError("b_star must be positive")
    cfg0 = cfg.with_changes(beta=0.0)
    b1, b2 = tier_bands(cfg, tc)
    if b1.p_F > tc.b_star + 1e-12:
        raise PriceBandError(f"basic-service band reaches {b1.p_F:.6g}, above the severity threshold {tc.b_star:.6g}")
    p1 = tc.p1 if p1 is None else p1
    p2 = tc.p2 if p2 is None else p2
    if p1 is None or not b1.contains(p1):
        raise PriceBandError(f"p1={p1} outside the basic-service band [{b1.p_N:.6g}, {b1.p_F:.6g}]")
    if b2 is not None and (p2 is None or not b2.contains(p2)):
        raise PriceBandError(f"p2={p2} outside the advanced-service band [{b2.p_N:.6g}, {b2.p_F:.6g}]")
    kw1 = dict(supply=tc.supply_1, refine=refine)
    kw2 = dict(lo=tc.b_star, supply=tc.supply_2, refine=refine)
    if workers > 1 and b2 is not None:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=2) as ex:
            f1 = ex.submit(_tier_solve, cfg0, p1, kw1)
            f2 = ex.submit(_tier_solve, cfg0, p2, kw2)
            basic, adv = f1.result(), f2.result()
    else:
        basic = solve_first_stage(cfg0, p1, **kw1)
        adv = solve_first_stage(cfg0, p2, **kw2) if b2 is not None else None
    return TierSolution(basic, adv, b1, b2)


def _tier_solve(cfg, p, kw):
    return solve_first_stage(cfg, p, **kw)


def shifted_scenario(cfg: ScenarioConfig, tc: TierConfig) -> ScenarioConfig:
    """Baseline scenario whose valuations are the advanced-service excess b - b*."""
    return cfg.with_changes(valuations=ShiftedFamily(cfg.valuations, tc.b_star), supply=tc.supply_2, beta=0.0)
