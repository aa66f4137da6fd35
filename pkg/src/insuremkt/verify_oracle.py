"""Independent checks: exact rational LP over couplings, dual certificates,
complementary slackness, brute-force agent best responses, finite differences,
and a direct premium-minus-payout profit count.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .dual_utility import outside_option, uncovered_integral
from .model_core import ScenarioConfig
from .screening import Menu, density_breaks, phi_table


class InfeasibleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# discrete transport LP

@dataclass
class DiscreteOTInstance:
    masses: np.ndarray       # f_i, sum to 1
    q: np.ndarray            # q_j
    Phi: np.ndarray          # Phi_ij
    C: np.ndarray            # c_ij (coupling coefficient)
    rs: float

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=float)
        self.Phi = np.asarray(self.Phi, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        if abs(self.masses.sum() - 1.0) > 1e-12:
            raise ValueError("masses must sum to 1")
        if not (np.all(np.isfinite(self.Phi)) and np.all(np.isfinite(self.C))):
            raise ValueError("payoff and coupling matrices must be finite")

    def exact_masses(self):
        fr = [Fraction(float(m)) for m in self.masses]
        total = sum(fr)
        return [m / total for m in fr]


def build_instance(cfg: ScenarioConfig, p: float, q_grid=None, *, lo: float = 0.0, density=None,
                   rs: float | None = None, supply=None) -> DiscreteOTInstance:
    from .market import uninsured_demand

    q = np.linspace(0.0, 1.0, cfg.grids.n_q) if q_grid is None else np.asarray(q_grid, dtype=float)
    Phi, c = phi_table(cfg, p, q, lo, density)
    if rs is None:
        S = supply or cfg.supply
        rs = float(S(p)) - uninsured_demand(cfg, p, lo)
    return DiscreteOTInstance(cfg.mass.copy(), q, Phi, c[:, None] * q[None, :], rs)


@dataclass
class PrimalResult:
    value: float
    value_exact: Fraction
    coupling: np.ndarray
    lambda_star: float
    lambda_exact: Fraction
    support_sizes: list = field(default_factory=list)


def _exact_hull(xs, ys):
    """Strict upper hull (indices) in exact arithmetic; xs nondecreasing."""
    hull = []
    for k in range(len(xs)):
        # equal abscissae: keep the higher point only
        if hull and xs[hull[-1]] == xs[k]:
            if ys[k] > ys[hull[-1]]:
                hull.pop()
            else:
                continue
        while len(hull) >= 2:
            i, j = hull[-2], hull[-1]
            if (xs[j] - xs[i]) * (ys[k] - ys[i]) - (ys[j] - ys[i]) * (xs[k] - xs[i]) >= 0:
                hull.pop()
            else:
                break
        hull.append(k)
    return hull


def solve_primal_exact(inst: DiscreteOTInstance) -> PrimalResult:
    """Exact optimum of max sum f_i pi_ij Phi_ij s.t. row marginals f_i and sum pi_ij c_ij = RS.

    With a single linking constraint, the optimum fills hull faces of each row in
    decreasing order of payoff per unit of demand (a fractional knapsack over faces).
    """
    f = inst.exact_masses()
    n, m = inst.Phi.shape
    X = [[Fraction(float(v)) for v in row] for row in inst.C]
    Y = [[Fraction(float(v)) for v in row] for row in inst.Phi]
    rs = Fraction(float(inst.rs))
    hulls, faces = [], []
    base_val, base_dem = Fraction(0), Fraction(0)
    lo_dem, hi_dem = Fraction(0), Fraction(0)
    for i in range(n):
        order = sorted(range(m), key=lambda j: (X[i][j], Y[i][j]))
        xs = [X[i][j] for j in order]
        ys = [Y[i][j] for j in order]
        h = [order[k] for k in _exact_hull(xs, ys)]
        # start each row at its least-demand point with the highest payoff there
        hulls.append(h)
        base_val += f[i] * Y[i][h[0]]
        base_dem += f[i] * X[i][h[0]]
        lo_dem += f[i] * min(xs)
        hi_dem += f[i] * max(xs)
        for a, b in zip(h[:-1], h[1:]):
            faces.append(((Y[i][b] - Y[i][a]) / (X[i][b] - X[i][a]), i, a, b))
    if rs < lo_dem or rs > hi_dem:
        raise InfeasibleError(f"residual supply {float(rs)} outside [{float(lo_dem)}, {float(hi_dem)}]")
    if rs < base_dem:
        raise InfeasibleError("residual supply below the demand of every row's best low point")
    faces.sort(key=lambda t: (-t[0], t[1]))
    pos = {i: hulls[i][0] for i in range(n)}
    frac = {}
    remaining = rs - base_dem
    value = base_val
    lam = None
    last_slope = None
    for slope, i, a, b in faces:
        if remaining == 0:
            lam = -last_slope if last_slope is not None else -slope
            break
        cap = f[i] * (X[i][b] - X[i][a])
        if remaining >= cap:
            remaining -= cap
            value += f[i] * (Y[i][b] - Y[i][a])
            pos[i] = b
            last_slope = slope
        else:
            t = remaining / cap
            value += t * f[i] * (Y[i][b] - Y[i][a])
            frac[i] = (a, b, t)
            remaining = Fraction(0)
            lam = -slope
            break
    if lam is None:
        lam = -last_slope if last_slope is not None else Fraction(0)
    pi = np.zeros((n, m))
    sizes = []
    for i in range(n):
        if i in frac:
            a, b, t = frac[i]
            pi[i, a] = float(f[i] * (1 - t))
            pi[i, b] = float(f[i] * t)
            sizes.append(2 if 0 < t < 1 else 1)
        else:
            pi[i, pos[i]] = float(f[i])
            sizes.append(1)
    return PrimalResult(float(value), value, pi, float(lam), lam, sizes)


@dataclass
class DualCertificate:
    v: np.ndarray
    value: float
    value_exact: Fraction | None = None


def dual_certificate(inst: DiscreteOTInstance, lam, exact: bool = True) -> DualCertificate:
    """v_i = max_j Phi_ij + lam (c_ij - RS); dual value sum f_i v_i (an upper bound for any lam)."""
    if exact:
        L = lam if isinstance(lam, Fraction) else Fraction(float(lam))
        rs = Fraction(float(inst.rs))
        f = inst.exact_masses()
        vs = []
        for i in range(inst.Phi.shape[0]):
            vs.append(max(Fraction(float(p)) + L * (Fraction(float(c)) - rs)
                          for p, c in zip(inst.Phi[i], inst.C[i])))
        val = sum(fi * vi for fi, vi in zip(f, vs))
        return DualCertificate(np.array([float(v) for v in vs]), float(val), val)
    obj = inst.Phi + float(lam) * (inst.C - inst.rs)
    v = obj.max(axis=1)
    return DualCertificate(v, float(inst.masses @ v))


@dataclass
class SlacknessReport:
    passed: bool
    worst_gap: float
    flagged_rows: list


def complementary_slackness_check(inst: DiscreteOTInstance, coupling, lam, tol: float = 1e-9) -> SlacknessReport:
    coupling = np.asarray(coupling, dtype=float)
    row_sums = coupling.sum(axis=1)
    if np.max(np.abs(row_sums - inst.masses)) > max(tol, 1e-12) * 10:
        raise ValueError("coupling row marginals do not match the type masses")
    obj = inst.Phi + float(lam) * inst.C
    best = obj.max(axis=1)
    worst, flagged = 0.0, []
    for i in range(obj.shape[0]):
        sup = coupling[i] > 0
        gap = float(np.max(best[i] - obj[i, sup])) if sup.any() else 0.0
        scale = tol * (1.0 + abs(best[i]))
        if gap > scale:
            flagged.append(i)
        worst = max(worst, gap)
    return SlacknessReport(not flagged, worst, flagged)


def coupling_from_solution(sol, q_grid=None):
    """Express a first-stage solution's supports as a coupling on a q grid (grid must contain the support points)."""
    prob = sol.problem
    q = prob.q if q_grid is None else np.asarray(q_grid, dtype=float)
    pi = np.zeros((len(sol.supports), len(q)))
    for i, sup in enumerate(sol.supports):
        for qq, w in sup:
            j = int(np.argmin(np.abs(q - qq)))
            if abs(q[j] - qq) > 1e-12:
                raise ValueError(f"support point {qq} not on the grid")
            pi[i, j] += prob.mass[i] * w
    return pi


def augmented_grid(sol, base=None):
    """Union of the solver's q grid and every support point (for off-grid refined solutions)."""
    q = sol.problem.q if base is None else np.asarray(base, dtype=float)
    pts = [qq for sup in sol.supports for qq, _ in sup]
    return np.unique(np.concatenate([q, pts]))


# ---------------------------------------------------------------------------
# incentive checks

@dataclass
class ICReport:
    worst_ic1_violation: float
    worst_ic2_violation: float
    worst_ir_violation: float
    ic1_pair: tuple = ()
    ic2_at: tuple = ()
    ir_type: float | None = None
    ic1_matrix: np.ndarray | None = field(default=None, repr=False)

    def passed(self, tol: float) -> bool:
        return max(self.worst_ic1_violation, self.worst_ic2_violation, self.worst_ir_violation) <= tol


def ic_brute_force(menu: Menu, cfg: ScenarioConfig, p: float | None = None) -> ICReport:
    """Evaluate every report for every type, every contract item for every valuation, and participation."""
    p = menu.p if p is None else p
    tol = cfg.tolerances.integration_tol
    g, fam = cfg.distortion, cfg.valuations
    alloc = menu.allocation()
    n = len(menu.thetas)
    thetas = np.asarray(menu.thetas, dtype=float)
    # IC1 / IR
    U = np.empty((n, n))
    for i in range(n):
        th = thetas[i]
        w = lambda b, th=th: 1.0 - g(fam.cdf(th, b))
        for k in range(n):
            row = alloc[k]
            br = [x for x in list(fam.kinks()) if row.lo < x < row.top]
            U[i, k] = -menu.premiums[k] - uncovered_integral(row, w, br, tol)
    own = np.diag(U)
    dev = U - own[:, None]
    np.fill_diagonal(dev, -np.inf)
    ic1 = float(dev.max()) if n > 1 else -np.inf
    pair = np.unravel_index(int(np.argmax(dev)), dev.shape) if n > 1 else ()
    ir = np.empty(n)
    for i in range(n):
        if menu.lo == 0.0:
            u_np = outside_option(thetas[i], p, cfg.beta, g, fam, tol)
        else:
            from .quadrature import integrate

            top = min(menu.lo + p, cfg.b_max)
            u_np = -integrate(lambda b, th=thetas[i]: 1.0 - g(fam.cdf(th, b)), menu.lo, top, (), tol)
        ir[i] = u_np - own[i]
    # IC2: truthful loss vs best item (or no item) at each valuation
    worst2, at2 = -np.inf, ()
    for k, c in enumerate(menu.contracts):
        row = alloc[k]
        top = row.top
        jumps = row.jump_points()
        dense = np.linspace(0.0, cfg.b_max, 4 * cfg.grids.n_b + 1)
        extra = []
        for x in jumps + [top, row.lo]:
            extra += [x - 1e-9, x, x + 1e-9]
        bs = np.unique(np.clip(np.concatenate([dense, extra]), 0.0, cfg.b_max))
        truthful = row.loss(bs)
        # items: (x, D) pairs available from the contract; losses are for the capped valuation b_p
        bp = np.minimum(np.maximum(bs - row.lo, 0.0), top - row.lo) + np.minimum(bs, row.lo)
        items = _contract_items(c)
        best = bp.copy()  # pay full price / stay home
        for xk, Dk in items:
            best = np.minimum(best, np.minimum(bs, row.lo) + xk * np.minimum(Dk, bp - np.minimum(bs, row.lo))
                              + (1 - xk) * (bp - np.minimum(bs, row.lo)))
        viol = truthful - best
        j = int(np.argmax(viol))
        if viol[j] > worst2:
            worst2, at2 = float(viol[j]), (float(thetas[k]), float(bs[j]))
    ir_i = int(np.argmax(ir))
    return ICReport(ic1, worst2, float(ir[ir_i]), tuple(int(x) for x in pair), at2, float(thetas[ir_i]), U)


def _contract_items(c):
    if c.kind == "simple":
        return [(1.0, c.D)]
    return [(c.alpha, c.D), (1.0, c.M)]


# ---------------------------------------------------------------------------
# finite differences and direct accounting

def finite_difference(fn, p: float, h: float, band=None) -> float:
    if h <= 0:
        raise ValueError("step h must be positive")
    if band is not None and not (band.p_N <= p - h and p + h <= band.p_F):
        raise ValueError("finite-difference stencil leaves the price band")
    return (fn(p + h) - fn(p - h)) / (2.0 * h)


def direct_profit(menu: Menu, cfg: ScenarioConfig, p: float | None = None) -> float:
    """Premium revenue minus expected payouts, computed straight from the contracts.

    A covered agent with valuation b pays their out-of-pocket cost and the insurer
    pays the rest of the price: payout(b) = x p - (L(b) - (1 - x) b) for b <= p,
    and p - L(p) for b > p. Uninsured demand above p + beta pays the markup beta
    to nobody; the insurer's outside-option gain is already inside the premiums.
    """
    from .quadrature import integrate

    p = menu.p if p is None else p
    tol = cfg.tolerances.integration_tol
    fam = cfg.valuations
    alloc = menu.allocation()
    total = 0.0
    for i, row in enumerate(alloc.rows):
        th = menu.thetas[i]
        pts = [0.0] + [x for x in row.jump_points() if 0.0 < x < p] + [p]
        pay = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            if b <= a:
                continue
            lev = float(row.level(0.5 * (a + b)))
            if lev <= 0:
                continue
            f = lambda x, lev=lev: (lev * p - (row.loss(x) - (1.0 - lev) * x)) * fam.pdf(th, x)
            pay += integrate(f, a, b, [k for k in fam.kinks() if a < k < b], tol)
        pay += (1.0 - float(fam.cdf(th, p))) * (p - float(row.loss(p)))
        total += cfg.mass[i] * (menu.premiums[i] - pay)
    return float(total)
