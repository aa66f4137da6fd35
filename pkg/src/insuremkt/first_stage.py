"""Menu design at a fixed service price via Lagrangian relaxation in quantity space.

For each atom the normalized cumulative value Psi_i(q) = Phi_i(q) / c_i is tabulated
on a uniform q grid. Given a multiplier lam, an atom's best response maximizes
Psi_i(q) + lam * q, which is read off the upper hull of Psi_i. The multiplier is
bisected until insured demand sum m_i c_i q_i matches residual supply; atoms that
are indifferent at the terminal multiplier share one mixing weight.

With ``refine=True`` (default) a best response that sits on a locally concave
stretch of the hull is moved off the grid to the exact first-order point
phi_i(q) = -lam, so deductibles vary continuously with the price. With
``refine=False`` everything stays on the grid, which is the discretized problem
that the exact LP oracle solves.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .market import PriceBandError, aggregate_demand, uninsured_demand
from .model_core import ScenarioConfig
from .quadrature import integrate
from .screening import (
    Allocation,
    Menu,
    StepAllocation,
    check_ic1,
    contract_from_allocation,
    density_breaks,
    premiums_from_allocation,
    value_density,
)


# ---------------------------------------------------------------------------
# hull

def concave_envelope(q, values):
    """Vertex indices of the least concave majorant of (q, values); q strictly increasing."""
    q = np.ascontiguousarray(q, dtype=float)
    values = np.ascontiguousarray(values, dtype=float)
    if len(q) < 2:
        raise ValueError("need at least two points")
    if np.any(np.diff(q) <= 0):
        raise ValueError("q values must be strictly increasing")
    return kernels.upper_hull(q, values)


def hull_eval(q, values, vertices, x):
    return np.interp(x, np.asarray(q)[vertices], np.asarray(values)[vertices])


# ---------------------------------------------------------------------------
# problem

@dataclass
class StageProblem:
    cfg: ScenarioConfig
    p: float
    lo: float
    rs: float
    q: np.ndarray
    Psi: np.ndarray          # normalized cumulative value, shape (n, n_q)
    c: np.ndarray            # window mass per atom
    mass: np.ndarray
    density: object          # density(rows, b) -> value density J*h
    active: np.ndarray
    hulls: list = field(default_factory=list)
    slopes: list = field(default_factory=list)

    @property
    def top(self):
        return self.lo + self.p

    @property
    def weight(self):
        return self.mass * self.c

    def b_of_q(self, rows, q):
        fam = self.cfg.valuations
        th = self.cfg.theta[rows]
        H_lo = fam.cdf(th, self.lo)
        b = fam.inv(th, (1.0 - q) * self.c[rows] + H_lo)
        b = np.clip(b, self.lo, self.top)
        b = np.where(q <= 0.0, self.top, b)
        return np.where(q >= 1.0, self.lo, b)

    def foc(self, rows, q, lam):
        """Sign-carrying marginal value: (phi + lam) * h, evaluated without dividing by h."""
        b = self.b_of_q(rows, q)
        h = self.cfg.valuations.pdf(self.cfg.theta[rows], b)
        h = np.where(np.isfinite(h), h, 1e300)
        return self.density(rows, b) + lam * h

    def phi_end(self, rows, q_end):
        """phi at a grid end (may be infinite)."""
        b = self.b_of_q(rows, np.full(len(rows), q_end))
        h = self.cfg.valuations.pdf(self.cfg.theta[rows], b)
        w = self.density(rows, b)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = w / h
        return np.where(h > 0, out, np.where(w > 0, np.inf, np.where(w < 0, -np.inf, 0.0)))

    def psi_at(self, i, q):
        """Exact normalized value at an arbitrary q, anchored at the nearest grid point."""
        j = int(np.argmin(np.abs(self.q - q)))
        if abs(self.q[j] - q) <= 1e-15:
            return float(self.Psi[i, j])
        b_q = float(self.b_of_q(np.array([i]), np.array([q]))[0])
        b_j = float(self.b_of_q(np.array([i]), np.array([self.q[j]]))[0])
        lo_b, hi_b = min(b_q, b_j), max(b_q, b_j)
        part = integrate(lambda b: self.density(i, b), b_q, b_j,
                         density_breaks(self.cfg, i, lo_b, hi_b), self.cfg.tolerances.integration_tol * 1e-2)
        return float(self.Psi[i, j] + part / self.c[i])


class WindowDensity:
    """Picklable insurer value density J*h on the window (lo, lo + p]."""

    def __init__(self, cfg, p, lo=0.0):
        self.cfg, self.p, self.lo = cfg, p, lo

    def __call__(self, rows, b):
        return value_density(self.cfg, rows, b, self.p, self.lo)


def build_problem(cfg: ScenarioConfig, p: float, *, lo: float = 0.0, rs: float | None = None,
                  supply=None, density=None, n_q: int | None = None) -> StageProblem:
    from .screening import phi_table

    n_q = n_q or cfg.grids.n_q
    q = np.linspace(0.0, 1.0, n_q)
    if density is None:
        density = WindowDensity(cfg, p, lo)
    if rs is None:
        S = supply or cfg.supply
        rs = float(S(p)) - uninsured_demand(cfg, p, lo)
    Phi, c = phi_table(cfg, p, q, lo, density)
    active = c > 1e-300
    Psi = np.zeros_like(Phi)
    Psi[active] = Phi[active] / c[active, None]
    prob = StageProblem(cfg, p, lo, float(rs), q, Psi, c, cfg.mass.copy(), density, active)
    hulls = kernels.upper_hulls(q, np.ascontiguousarray(Psi))
    for i in range(cfg.n_atoms):
        v = hulls[i] if active[i] else np.array([0], dtype=np.intp)
        prob.hulls.append(v)
        prob.slopes.append(np.diff(Psi[i, v]) / np.diff(q[v]) if len(v) > 1 else np.empty(0))
    return prob


# ---------------------------------------------------------------------------
# best responses

@dataclass
class Response:
    q_lo: float
    q_hi: float
    value: float


def _grid_vertex(prob, i, lam, side):
    s = prob.slopes[i]
    # number of hull faces worth climbing: slopes > -lam (min maximizer) or >= -lam (max maximizer)
    return int(np.count_nonzero(s > -lam)) if side == "lo" else int(np.count_nonzero(s >= -lam))


def grid_responses(prob: StageProblem, lam: float, side: str):
    out = np.zeros(len(prob.c))
    for i in np.flatnonzero(prob.active):
        out[i] = prob.q[prob.hulls[i][_grid_vertex(prob, i, lam, side)]]
    return out


def refined_responses(prob: StageProblem, lam: float, side: str, iters: int = 44):
    """Best responses with local first-order refinement on concave stretches of the hull."""
    rows = np.flatnonzero(prob.active)
    out = np.zeros(len(prob.c))
    if len(rows) == 0:
        return out
    q = prob.q
    nq = len(q)
    jv = np.empty(len(rows), dtype=int)
    left = np.empty(len(rows))
    right = np.empty(len(rows))
    for r, i in enumerate(rows):
        v = prob.hulls[i]
        k = _grid_vertex(prob, i, lam, side)
        j = int(v[k])
        jv[r] = j
        left[r] = q[j - 1] if (k > 0 and v[k - 1] == j - 1) else q[j]
        right[r] = q[j + 1] if (k < len(v) - 1 and v[k + 1] == j + 1) else q[j]
    qj = q[jv]
    Fj = prob.foc(rows, qj, lam)
    res = qj.copy()
    up = (Fj > 0) & (right > qj)
    dn = (Fj < 0) & (left < qj)
    a = np.where(up, qj, np.where(dn, left, qj))
    b = np.where(up, right, np.where(dn, qj, qj))
    todo = up | dn
    if todo.any():
        Fa = prob.foc(rows[todo], a[todo], lam)
        Fb = prob.foc(rows[todo], b[todo], lam)
        # a root exists when F changes sign across the local cell; otherwise the grid vertex is kept
        change = (Fa > 0) & (Fb < 0)
        aa, bb = a[todo].copy(), b[todo].copy()
        sub = rows[todo]
        for _ in range(iters):
            mid = 0.5 * (aa + bb)
            pos = prob.foc(sub, mid, lam) > 0
            aa = np.where(change & pos, mid, aa)
            bb = np.where(change & ~pos, mid, bb)
        res[todo] = np.where(change, 0.5 * (aa + bb), qj[todo])
    out[rows] = res
    return out


def per_type_best_response(prob: StageProblem, i: int, lam: float, refine: bool = False) -> Response:
    fn = refined_responses if refine else grid_responses
    qlo = float(fn(prob, lam, "lo")[i])
    qhi = float(fn(prob, lam, "hi")[i])
    val = prob.psi_at(i, qhi) + lam * qhi if refine else float(prob.Psi[i, np.searchsorted(prob.q, qhi)] + lam * qhi)
    return Response(qlo, qhi, val)


# ---------------------------------------------------------------------------
# multiplier

@dataclass
class LambdaResult:
    lambda_star: float
    supports: list
    bracket: tuple
    tied: list


def _demand(prob, qs):
    return float(np.sum(prob.weight * qs))


def _bisect(pred, lo, hi, tol, max_iter=200):
    """pred true at lo, false at hi; shrink until width <= tol."""
    for _ in range(max_iter):
        if hi - lo <= tol * max(1.0, abs(lo), abs(hi)):
            break
        mid = 0.5 * (lo + hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo, hi


def _bracket(fn, lo, hi, f_lo, f_hi, tol, max_iter=200):
    """Shrink [lo, hi] with fn(lo) <= 0 < fn(hi) by Illinois false position, with bisection as a safeguard.

    fn is nondecreasing but may jump, so the bracket (not a root) is returned.
    """
    side = 0
    for it in range(max_iter):
        width = hi - lo
        if width <= tol * max(1.0, abs(lo), abs(hi)):
            break
        if it % 3 == 2 or f_hi <= f_lo:
            mid = 0.5 * (lo + hi)
        else:
            mid = lo - f_lo * width / (f_hi - f_lo)
            # keep strictly inside and away from the ends
            guard = 1e-3 * width
            mid = min(max(mid, lo + guard), hi - guard)
        fm = fn(mid)
        if fm <= 0:
            lo, f_lo = mid, fm
            if side == -1:
                f_hi *= 0.5
            side = -1
        else:
            hi, f_hi = mid, fm
            if side == 1:
                f_lo *= 0.5
            side = 1
    return lo, hi


def solve_lambda(prob: StageProblem, refine: bool = True) -> LambdaResult:
    tol = prob.cfg.tolerances.bisection_tol
    resp = refined_responses if refine else grid_responses
    rows = np.flatnonzero(prob.active)
    total = float(np.sum(prob.weight[rows]))
    rs = prob.rs
    slack = 1e-8 * max(1.0, total)
    if rs < -slack or rs > total + slack:
        raise PriceBandError(f"price {prob.p} outside the feasible band (residual supply {rs:.6g})")

    big = 1.0 + max([np.max(np.abs(prob.slopes[i])) for i in rows if len(prob.slopes[i])] + [0.0])
    if refine and len(rows):
        ends = np.concatenate([prob.phi_end(rows, 0.0), prob.phi_end(rows, 1.0)])
        ends = ends[np.isfinite(ends)]
        if ends.size:
            big = max(big, 1.0 + float(np.max(np.abs(ends))))

    n = len(prob.c)
    if rs <= slack:
        # sup of multipliers that keep zero demand optimal
        if refine:
            phi0 = prob.phi_end(rows, 0.0)
            cand = [-max(prob.slopes[i][0] if len(prob.slopes[i]) else -np.inf, f) for i, f in zip(rows, phi0)]
        else:
            cand = [-prob.slopes[i][0] for i in rows if len(prob.slopes[i])]
        lam = float(min(cand)) if cand else 0.0
        lam = float(np.clip(lam, -big, big))
        return LambdaResult(lam, [[(0.0, 1.0)] for _ in range(n)], (lam, lam), [])
    if rs >= total - slack:
        if refine:
            phi1 = prob.phi_end(rows, 1.0)
            cand = [-min(prob.slopes[i][-1] if len(prob.slopes[i]) else np.inf, f) for i, f in zip(rows, phi1)]
        else:
            cand = [-prob.slopes[i][-1] for i in rows if len(prob.slopes[i])]
        lam = float(max(cand)) if cand else 0.0
        lam = float(np.clip(lam, -big, big))
        sup = [[(1.0, 1.0)] if prob.active[i] else [(0.0, 1.0)] for i in range(n)]
        return LambdaResult(lam, sup, (lam, lam), [])

    excess_grid = lambda lam: _demand(prob, grid_responses(prob, lam, "hi")) - rs
    lo_l, hi_l = _bracket(excess_grid, -big, big, excess_grid(-big), excess_grid(big), tol)
    if refine:
        excess = lambda lam: _demand(prob, refined_responses(prob, lam, "hi")) - rs
        width = 1e-3 * (1.0 + abs(lo_l))
        a, b = lo_l - width, hi_l + width
        fa, fb = excess(a), excess(b)
        for _ in range(60):
            if fa <= 0:
                break
            a -= width
            width *= 4
            fa = excess(a)
        width = 1e-3 * (1.0 + abs(hi_l))
        for _ in range(60):
            if fb > 0:
                break
            b += width
            width *= 4
            fb = excess(b)
        lo_l, hi_l = _bracket(excess, a, b, fa, fb, tol)

    q_a = resp(prob, lo_l, "hi")
    q_b = resp(prob, hi_l, "lo")
    d_a, d_b = _demand(prob, q_a), _demand(prob, q_b)
    w = 0.0 if d_b <= d_a else float(np.clip((rs - d_a) / (d_b - d_a), 0.0, 1.0))
    supports, tied = [], []
    for i in range(n):
        if not prob.active[i]:
            supports.append([(0.0, 1.0)])
        elif q_b[i] > q_a[i]:
            tied.append(i)
            supports.append([(float(q_a[i]), 1.0 - w), (float(q_b[i]), w)])
        else:
            supports.append([(float(q_a[i]), 1.0)])
    return LambdaResult(0.5 * (lo_l + hi_l), supports, (lo_l, hi_l), tied)


def _collapse(prob: StageProblem, i: int, support):
    """Replace a two-point mix by its mean when Psi is concave between the points (no gain from mixing)."""
    (qa, wa), (qb, wb) = support
    if wa <= 0 or wb <= 0:
        return [(qa, 1.0)] if wb <= 0 else [(qb, 1.0)]
    inside = (prob.q > qa) & (prob.q < qb)
    if inside.any():
        pa, pb = prob.psi_at(i, qa), prob.psi_at(i, qb)
        chord = pa + (pb - pa) * (prob.q[inside] - qa) / (qb - qa)
        scale = 1e-12 * (1.0 + np.max(np.abs(prob.Psi[i])))
        if np.any(prob.Psi[i, inside] < chord - scale):
            return support
    return [(wa * qa + wb * qb, 1.0)]


# ---------------------------------------------------------------------------
# solution

@dataclass
class FirstStageSolution:
    p: float
    lambda_star: float
    supports: list
    allocation: Allocation
    menu: Menu
    profit: float
    lagrangian_value: float
    K: float
    rs: float
    clearing_gap: float
    ic1_pass: bool
    ic1_witness: object = None
    duality_gap: float | None = None
    lo: float = 0.0
    bracket: tuple = (0.0, 0.0)
    tied: list = field(default_factory=list)
    problem: StageProblem | None = field(default=None, repr=False)
    refined: bool = True

    @property
    def contracts(self):
        return self.menu.contracts

    def top_levels(self):
        return np.array([r.top_level() for r in self.allocation.rows])

    def deductibles(self):
        """Lowest jump point per atom relative to the window bottom (top of window when uncovered)."""
        out = []
        for r in self.allocation.rows:
            jp = r.jump_points()
            out.append((jp[0] if jp else r.top) - r.lo)
        return np.array(out)

    def n_covered(self):
        return int(np.sum(self.top_levels() > 1e-12))

    def scalars(self):
        return {"p": self.p, "lambda_star": self.lambda_star, "profit": self.profit,
                "clearing_gap": self.clearing_gap}


def outside_rent_constant(cfg: ScenarioConfig, p: float) -> float:
    """K(p): value recovered from the uninsured markup beta (int_p^{p+beta} [1 - g(H)])."""
    if cfg.beta <= 0:
        return 0.0
    hi = min(p + cfg.beta, cfg.b_max)
    if hi <= p:
        return 0.0
    g, fam = cfg.distortion, cfg.valuations
    tol = cfg.tolerances.integration_tol
    if cfg.known_type:
        return float(sum(m * integrate(lambda b, t=t: 1.0 - g(fam.cdf(t, b)), p, hi, density_breaks(cfg, k, p, hi), tol)
                         for k, (t, m) in enumerate(zip(cfg.theta, cfg.mass))))
    t0 = cfg.theta[0]
    return integrate(lambda b: 1.0 - g(fam.cdf(t0, b)), p, hi, density_breaks(cfg, 0, p, hi), tol)


def assemble(prob: StageProblem, lam: LambdaResult, refine: bool, *, U_lo=None, K: float | None = None,
             supply=None) -> FirstStageSolution:
    cfg = prob.cfg
    supports = lam.supports
    if refine:
        supports = [(_collapse(prob, i, s) if len(s) == 2 and prob.active[i] else s) for i, s in enumerate(supports)]
    rows = []
    value = 0.0
    for i, sup in enumerate(supports):
        if not prob.active[i]:
            rows.append(StepAllocation((prob.top,), (1.0,), prob.top, prob.lo))
            continue
        qs = np.array([q for q, _ in sup])
        ws = [w for _, w in sup]
        cuts = prob.b_of_q(np.full(len(qs), i), qs)
        rows.append(StepAllocation(tuple(float(x) for x in cuts), tuple(ws), prob.top, prob.lo))
        for q, w in sup:
            if w > 0:
                psi = prob.psi_at(i, q) if refine else float(prob.Psi[i, int(np.argmin(np.abs(prob.q - q)))])
                value += prob.mass[i] * prob.c[i] * w * psi
    alloc = Allocation(tuple(cfg.theta), tuple(rows))
    premiums, U = premiums_from_allocation(cfg, alloc, prob.p, U_lo, prob.lo)
    contracts = [contract_from_allocation(r) for r in rows]
    menu = Menu(tuple(cfg.theta), contracts, premiums, float(U[0]), prob.p, prob.lo, U)
    if K is None:
        K = outside_rent_constant(cfg, prob.p) if prob.lo == 0.0 else 0.0
    insured = sum(prob.weight[i] * sum(w * q for q, w in sup) for i, sup in enumerate(supports) if prob.active[i])
    gap = float(insured - prob.rs)
    ok, wit = check_ic1(alloc)
    return FirstStageSolution(
        p=prob.p, lambda_star=lam.lambda_star, supports=supports, allocation=alloc, menu=menu,
        profit=value + K, lagrangian_value=value, K=K, rs=prob.rs, clearing_gap=gap,
        ic1_pass=ok, ic1_witness=wit, lo=prob.lo, bracket=lam.bracket, tied=lam.tied, problem=prob,
        refined=refine,
    )


def solve_first_stage(cfg: ScenarioConfig, p: float, *, refine: bool = True, n_q: int | None = None,
                      lo: float = 0.0, supply=None, density=None, rs: float | None = None,
                      U_lo=None, K: float | None = None) -> FirstStageSolution:
    """Profit-maximizing menu at price p (window (lo, lo + p])."""
    prob = build_problem(cfg, p, lo=lo, rs=rs, supply=supply, density=density, n_q=n_q)
    lam = solve_lambda(prob, refine=refine)
    return assemble(prob, lam, refine, U_lo=U_lo, K=K, supply=supply)


def demand_of(sol: FirstStageSolution, cfg: ScenarioConfig) -> float:
    return aggregate_demand(cfg, sol.allocation, sol.p, sol.lo)
