"""Price optimization over the feasible band: the envelope derivative, the
price-taking benchmark, the optimum and comparative statics in beta."""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .first_stage import FirstStageSolution, solve_first_stage
from .market import PriceBand, price_band
from .model_core import ScenarioConfig
from .screening import information_rent, rent_free_value, value_density


def _outside_term(cfg: ScenarioConfig, p: float) -> float:
    """Derivative of the lowest type's outside option contribution: g(H(p+beta)) - g(H(p))."""
    if cfg.beta <= 0:
        return 0.0
    g, fam = cfg.distortion, cfg.valuations
    hi = min(p + cfg.beta, cfg.b_max)
    if cfg.known_type:
        return float(np.sum(cfg.mass * (g(fam.cdf(cfg.theta, hi)) - g(fam.cdf(cfg.theta, p)))))
    t0 = cfg.theta[0]
    return float(g(fam.cdf(t0, hi)) - g(fam.cdf(t0, p)))


@dataclass
class DerivativeParts:
    surplus: float       # sum m x(p) J(p) h(p)
    cost: float          # sum m int x h
    equilibrium: float   # -lambda (S' + sum m (1 - x(p)) h(p))
    outside: float       # -[g(H(p+beta)) - g(H(p))]

    @property
    def total(self):
        return self.surplus - self.cost + self.equilibrium + self.outside


def profit_derivative_parts(sol: FirstStageSolution, cfg: ScenarioConfig, supply=None) -> DerivativeParts:
    S = supply or cfg.supply
    p, lo = sol.p, sol.lo
    top = lo + p
    fam = cfg.valuations
    idx = np.arange(cfg.n_atoms)
    x_top = sol.top_levels()
    jh = value_density(cfg, idx, np.full(cfg.n_atoms, top), p, lo)
    h_top = fam.pdf(cfg.theta, top)
    covered = np.array([
        r.insured_mass(lambda b, t=t: fam.cdf(t, b)) for r, t in zip(sol.allocation.rows, cfg.theta)
    ])
    surplus = float(np.sum(cfg.mass * x_top * jh))
    cost = float(np.sum(cfg.mass * covered))
    eq = -sol.lambda_star * (float(S.deriv(p)) + float(np.sum(cfg.mass * (1.0 - x_top) * h_top)))
    out = -_outside_term(cfg, p) if lo == 0.0 else 0.0
    return DerivativeParts(surplus, cost, eq, out)


def profit_derivative(sol: FirstStageSolution, cfg: ScenarioConfig, supply=None) -> float:
    return profit_derivative_parts(sol, cfg, supply).total


def simple_deductible_decomposition(sol: FirstStageSolution, cfg: ScenarioConfig) -> dict:
    """Split the derivative for simple-deductible menus into surplus extraction, cost and equilibrium effects."""
    fam = cfg.valuations
    p = sol.p
    D = sol.deductibles()
    covered = D < p - 1e-14
    idx = np.arange(cfg.n_atoms)
    J1 = rent_free_value(cfg, idx, np.full(cfg.n_atoms, p), p)
    h = fam.pdf(cfg.theta, p)
    surplus = float(np.sum(cfg.mass * covered * J1 * h))
    cost = float(np.sum(cfg.mass * covered * (1.0 - fam.cdf(cfg.theta, D))))
    # J(p) h(p) = J1 h - (1 - H(p)) at b = p; the (1 - H(p)) part cancels against the cost integral above p
    parts = profit_derivative_parts(sol, cfg)
    return {"surplus_extraction": surplus, "cost": cost, "equilibrium_effects": parts.equilibrium,
            "outside_option": parts.outside}


# ---------------------------------------------------------------------------
# sweep

@dataclass
class SweepRow:
    p: float
    profit: float
    profit_derivative: float
    lambda_star: float
    clearing_gap: float
    n_covered_types: int
    deductibles: np.ndarray = field(repr=False, default=None)


@dataclass
class PriceSweep:
    rows: list
    p_star: float
    p_U: float
    band: PriceBand
    classification: str = "unclassified"
    p_star_boundary: bool = False
    profit_star: float = float("nan")

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])


def _row(cfg, p, refine=True):
    sol = solve_first_stage(cfg, p, refine=refine)
    return SweepRow(p, sol.profit, profit_derivative(sol, cfg), sol.lambda_star, sol.clearing_gap,
                    sol.n_covered(), sol.deductibles())


def sweep_prices(cfg: ScenarioConfig, prices, workers: int = 1):
    prices = [float(p) for p in prices]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_row, [cfg] * len(prices), prices))
    return [_row(cfg, p) for p in prices]


def lambda_at(cfg, p, **kw):
    return solve_first_stage(cfg, p, **kw).lambda_star


def price_taking_benchmark(cfg: ScenarioConfig, band: PriceBand | None = None, **kw) -> float:
    """Price at which the clearing multiplier is zero, clamped to the band."""
    band = band or price_band(cfg)
    tol = cfg.tolerances.bisection_tol
    lamN = lambda_at(cfg, band.p_N, **kw)
    if lamN >= 0:
        return band.p_N
    lamF = lambda_at(cfg, band.p_F, **kw)
    if lamF <= 0:
        return band.p_F
    return brentq(lambda p: lambda_at(cfg, p, **kw), band.p_N, band.p_F, xtol=tol)


def optimize_price(cfg: ScenarioConfig, band: PriceBand | None = None, n_p: int | None = None,
                   workers: int = 1, with_benchmark: bool = True) -> PriceSweep:
    """Grid scan of profit, then refine the root of the derivative in the best bracket."""
    band = band or price_band(cfg)
    n_p = n_p or cfg.grids.n_p
    # stay a hair inside the band so that both ends are solvable
    ps = np.linspace(band.p_N, band.p_F, n_p)
    rows = sweep_prices(cfg, ps, workers)
    prof = np.array([r.profit for r in rows])
    k = int(np.argmax(prof))
    tol = cfg.tolerances.bisection_tol
    dfun = lambda p: profit_derivative(solve_first_stage(cfg, p), cfg)
    p_star, boundary = ps[k], True
    cand = []
    if k > 0 and rows[k - 1].profit_derivative > 0 > rows[k].profit_derivative:
        cand.append((ps[k - 1], ps[k]))
    if k < n_p - 1 and rows[k].profit_derivative > 0 > rows[k + 1].profit_derivative:
        cand.append((ps[k], ps[k + 1]))
    best_val = prof[k]
    for a, b in cand:
        r = brentq(dfun, a, b, xtol=tol)
        val = solve_first_stage(cfg, r).profit
        if val >= best_val - 1e-12:
            p_star, boundary, best_val = r, False, val
    if cand and boundary:
        # derivative root exists but the profit there is not better than the grid point
        boundary = k in (0, n_p - 1)
    p_U = price_taking_benchmark(cfg, band) if with_benchmark else float("nan")
    return PriceSweep(rows, float(p_star), float(p_U), band, p_star_boundary=boundary, profit_star=float(best_val))


# ---------------------------------------------------------------------------
# classification

@dataclass
class Classification:
    label: str
    surplus: float
    cost: float
    hypotheses_met: bool
    consistent: bool | None
    notes: list = field(default_factory=list)


def check_benchmark_hypotheses(cfg: ScenarioConfig, prices) -> tuple[bool, list]:
    notes = []
    if cfg.beta != 0:
        notes.append("beta is not zero")
    fam = cfg.valuations
    for p in prices:
        bs = np.linspace(0.0, p, 201)[1:]
        for i in range(cfg.n_atoms):
            J = value_density(cfg, i, bs, p) / fam.pdf(cfg.theta[i], bs)
            if np.any(np.diff(J) <= 0):
                notes.append(f"J not strictly increasing for theta={cfg.theta[i]:.4g} at p={p:.4g}")
                break
            J1 = rent_free_value(cfg, i, bs, p)
            if np.any(np.diff(J1) > 1e-12):
                notes.append(f"J1 not nonincreasing for theta={cfg.theta[i]:.4g} at p={p:.4g}")
                break
    bs = np.linspace(0.0, cfg.b_max, 401)[1:-1]
    h = fam.pdf(cfg.theta[:, None], bs[None, :])
    if np.any(np.diff(h, axis=1) > 1e-12):
        notes.append("H not concave in b")
    return not notes, notes


def classify_vs_benchmark(sweep: PriceSweep, cfg: ScenarioConfig, tol: float = 1e-9) -> Classification:
    pU = sweep.p_U
    sol = solve_first_stage(cfg, pU)
    fam = cfg.valuations
    D = sol.deductibles()
    covered = D < pU - 1e-12
    idx = np.arange(cfg.n_atoms)
    J1h = rent_free_value(cfg, idx, np.full(cfg.n_atoms, pU), pU) * fam.pdf(cfg.theta, pU)
    surplus = float(np.sum(cfg.mass * covered * J1h))
    cost = float(np.sum(cfg.mass * covered * (1.0 - fam.cdf(cfg.theta, D))))
    diff = surplus - cost
    label = "above_benchmark" if diff > tol else "below_benchmark" if diff < -tol else "at_benchmark"
    ok, notes = check_benchmark_hypotheses(cfg, [r.p for r in sweep.rows[1:-1]])
    step = (sweep.band.p_F - sweep.band.p_N) / max(len(sweep.rows) - 1, 1)
    # a benchmark clamped to a band end leaves no room on that side; p* = p^U is then the prediction
    at_F = pU >= sweep.band.p_F - tol
    at_N = pU <= sweep.band.p_N + tol
    if label == "above_benchmark":
        consistent = sweep.p_star > pU or (at_F and sweep.p_star >= pU - tol)
    elif label == "below_benchmark":
        consistent = sweep.p_star < pU or (at_N and sweep.p_star <= pU + tol)
    else:
        consistent = abs(sweep.p_star - pU) <= step
    if not ok:
        label = "hypotheses not met"
    sweep.classification = label
    return Classification(label, surplus, cost, ok, consistent, notes)


def beta_monotonicity(cfg: ScenarioConfig, betas, n_p: int | None = None):
    """p*(beta) for each beta; the list should be nonincreasing."""
    betas = sorted(float(b) for b in betas)
    if len(betas) < 2:
        raise ValueError("need at least two values of beta")
    out = []
    for b in betas:
        c = cfg.with_changes(beta=b)
        out.append(optimize_price(c, n_p=n_p, with_benchmark=False).p_star)
    return out
