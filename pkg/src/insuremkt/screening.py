"""Allocations, contract shapes, premiums, virtual values and the quantile transform.

Risk types are the atoms of ``cfg.theta``; functions taking ``i`` index an atom.
The information rent uses the exact atom form: for atom i with mass m_i and
mass M_i strictly above it,

    rent_i(b) = (M_i / m_i) * [g(H_{i+1}(b)) - g(H_i(b))],

which is what the downward-binding incentive constraints between neighbouring
atoms produce. It vanishes for the top atom and in known-type mode.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dual_utility import _g_breaks, outside_option, uncovered_integral
from .model_core import ScenarioConfig
from .quadrature import panel_integrals


class SingularDensityError(ValueError):
    pass


class DegenerateTypeError(ValueError):
    pass


JUMP_EPS = 1e-13


# ---------------------------------------------------------------------------
# allocations

@dataclass(frozen=True)
class StepAllocation:
    """Coverage x(b) for one type on the window (lo, top]: x(b) = sum_k w_k 1[b > c_k].

    x = 0 at and below lo, x = 1 above top. At a cutoff the lower level applies.
    """

    cutoffs: tuple
    weights: tuple
    top: float
    lo: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.cutoffs, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if c.shape != w.shape:
            raise ValueError("cutoffs and weights must have equal length")
        if np.any(w < -1e-12):
            raise ValueError("non-monotone allocation: negative step")
        if len(w) and abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("allocation steps must sum to 1")
        if np.any(c < self.lo - 1e-12) or np.any(c > self.top + 1e-12):
            raise ValueError("jump points must lie in the window")

    @classmethod
    def from_levels(cls, jumps, levels, top, lo=0.0):
        """Build from jump points b_1 < ... < b_k and levels x on each step (len k+1, starting at 0)."""
        levels = list(levels)
        if len(levels) != len(jumps) + 1:
            raise ValueError("need one more level than jumps")
        if any(b < a - 1e-15 for a, b in zip(levels[:-1], levels[1:])):
            raise ValueError("non-monotone allocation: levels must be nondecreasing in b")
        if abs(levels[0]) > 1e-15:
            raise ValueError("allocation must start at level 0 at the bottom of the window")
        steps = [levels[k + 1] - levels[k] for k in range(len(jumps))]
        cut = list(jumps)
        rest = 1.0 - levels[-1]
        if rest > 0:
            cut.append(top)
            steps.append(rest)
        return cls(tuple(cut), tuple(steps), top, lo)

    def level(self, b):
        b = np.asarray(b, dtype=float)
        c = np.asarray(self.cutoffs, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        x = np.sum(w * (b[..., None] > c), axis=-1)
        x = np.where(b > self.top, 1.0, x)
        return np.where(b <= self.lo, np.where(b > self.top, 1.0, 0.0), np.minimum(x, 1.0))

    def top_level(self) -> float:
        """Level just below the top of the window."""
        return float(sum(w for c, w in zip(self.cutoffs, self.weights) if c < self.top - JUMP_EPS))

    def jump_points(self):
        return sorted({float(c) for c, w in zip(self.cutoffs, self.weights) if w > 0 and c < self.top - JUMP_EPS})

    def steps(self):
        """(start, end, level) triples covering (lo, top]."""
        pts = [self.lo] + [c for c in self.jump_points() if c > self.lo] + [self.top]
        return [(a, b, float(self.level(0.5 * (a + b)))) for a, b in zip(pts[:-1], pts[1:]) if b > a]

    def loss(self, b):
        """int_0^min(b, top) (1 - x(l)) dl; 1-Lipschitz, flat above top."""
        b = np.minimum(np.asarray(b, dtype=float), self.top)
        out = np.minimum(np.maximum(b, 0.0), self.lo) * 1.0
        for a, e, lev in self.steps():
            out = out + (1.0 - lev) * np.clip(b - a, 0.0, e - a)
        return out

    def insured_mass(self, H) -> float:
        """int_lo^top x dH for a CDF callable H."""
        htop = float(H(self.top))
        return float(sum(w * (htop - float(H(max(c, self.lo))))
                         for c, w in zip(self.cutoffs, self.weights) if c < self.top))


@dataclass(frozen=True)
class Allocation:
    """Per-atom step allocations."""

    thetas: tuple
    rows: tuple

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i) -> StepAllocation:
        return self.rows[i]

    def level_matrix(self, b):
        return np.array([r.level(b) for r in self.rows])


# ---------------------------------------------------------------------------
# contracts

@dataclass(frozen=True)
class SimpleDeductible:
    D: float
    kind = "simple"

    def allocation(self, top, lo=0.0) -> StepAllocation:
        return StepAllocation((lo + self.D,), (1.0,), top, lo)

    @property
    def alpha(self):
        return 1.0

    @property
    def M(self):
        return self.D


@dataclass(frozen=True)
class LimitedCoverage:
    alpha: float
    D: float
    M: float
    kind = "limited"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 <= self.D < self.M:
            raise ValueError("need 0 <= D < M")

    @property
    def threshold(self) -> float:
        return (self.M - self.alpha * self.D) / (1.0 - self.alpha)

    def allocation(self, top, lo=0.0) -> StepAllocation:
        T = min(self.threshold, top - lo)
        return StepAllocation((lo + self.D, lo + T), (self.alpha, 1.0 - self.alpha), top, lo)


def contract_from_allocation(alloc: StepAllocation, tol: float = 1e-12):
    """Map a step allocation with at most two jumps to a simple or limited-coverage contract.

    Deductibles are reported relative to the bottom of the window.
    """
    lo, top = alloc.lo, alloc.top
    merged = {}
    for c, w in zip(alloc.cutoffs, alloc.weights):
        if w <= tol:
            continue
        key = min(float(c), top)
        hit = next((k for k in merged if abs(k - key) <= JUMP_EPS), None)
        merged[key if hit is None else hit] = merged.get(key if hit is None else hit, 0.0) + float(w)
    active = sorted((c, w) for c, w in merged.items() if c < top - JUMP_EPS)
    if len(active) > 2:
        raise ValueError("malformed step function: more than two jumps")
    if not active:
        return SimpleDeductible(top - lo)
    if len(active) == 1:
        c, w = active[0]
        if w >= 1.0 - tol:
            return SimpleDeductible(c - lo)
        hi = top
    else:
        (c, w), (hi, _) = active
    alpha = w
    if alpha >= 1.0 - tol:
        return SimpleDeductible(c - lo)
    if alpha <= tol:
        return SimpleDeductible(hi - lo)
    D = c - lo
    return LimitedCoverage(alpha, D, alpha * D + (1.0 - alpha) * (hi - lo))


# ---------------------------------------------------------------------------
# virtual values

def window_top(p, lo=0.0):
    return lo + p


def information_rent(cfg: ScenarioConfig, i, b):
    """Atom-form information rent (already multiplied by the density; no division by h)."""
    i = np.asarray(i)
    b = np.asarray(b, dtype=float)
    if cfg.known_type:
        return np.zeros(np.broadcast(i, b).shape)
    n = cfg.n_atoms
    g, fam = cfg.distortion, cfg.valuations
    th = cfg.theta[i]
    th_up = cfg.theta[np.minimum(i + 1, n - 1)]
    ratio = cfg.mass_above[i] / cfg.mass[i]
    return ratio * (g(fam.cdf(th_up, b)) - g(fam.cdf(th, b)))


def value_density(cfg: ScenarioConfig, i, b, p, lo=0.0):
    """J_i(b) h_i(b), written without dividing by the density."""
    i = np.asarray(i)
    b = np.asarray(b, dtype=float)
    fam = cfg.valuations
    th = cfg.theta[i]
    H = fam.cdf(th, b)
    h = fam.pdf(th, b)
    base = 1.0 - cfg.distortion(H)
    with np.errstate(invalid="ignore"):
        surplus = np.where(h == 0, 0.0, (b - lo - p) * h)
    return base + information_rent(cfg, i, b) + surplus - (1.0 - H)


def virtual_value(cfg: ScenarioConfig, i, b, p, lo=0.0):
    h = cfg.valuations.pdf(cfg.theta[np.asarray(i)], b)
    if np.any(np.asarray(h) < 1e-300):
        raise SingularDensityError("density below 1e-300; virtual value undefined")
    return value_density(cfg, i, b, p, lo) / h


def rent_free_value(cfg, i, b, p, lo=0.0):
    """Period-1 surplus term J_1 = [1 - g(H) + rent] / h."""
    h = cfg.valuations.pdf(cfg.theta[np.asarray(i)], b)
    return (1.0 - cfg.distortion(cfg.valuations.cdf(cfg.theta[np.asarray(i)], b)) + information_rent(cfg, i, b)) / h


def conditional_mass(cfg: ScenarioConfig, i, p, lo=0.0):
    th = cfg.theta[np.asarray(i)]
    return cfg.valuations.cdf(th, lo + p) - cfg.valuations.cdf(th, lo)


def quantile_valuation(cfg: ScenarioConfig, i, q, p, lo=0.0):
    """b_theta(q): the valuation above which a fraction q of the window's mass lies."""
    th = cfg.theta[i]
    fam = cfg.valuations
    top = lo + p
    H_lo = float(fam.cdf(th, lo))
    c = float(fam.cdf(th, top)) - H_lo
    if c <= 0:
        raise DegenerateTypeError(f"type {th} has no mass in the window")
    q = np.asarray(q, dtype=float)
    b = fam.inv(th, (1.0 - q) * c + H_lo)
    b = np.clip(b, lo, top)
    b = np.where(q <= 0.0, top, b)
    return np.where(q >= 1.0, lo, b)


def phi(cfg, i, q, p, lo=0.0):
    return virtual_value(cfg, i, quantile_valuation(cfg, i, q, p, lo), p, lo)


def density_breaks(cfg: ScenarioConfig, i: int, a: float, b: float):
    """Kink locations of the value density of atom i inside (a, b)."""
    pts = list(_g_breaks(cfg.valuations, cfg.distortion, cfg.theta[i], a, b))
    if i + 1 < cfg.n_atoms and not cfg.known_type:
        pts += _g_breaks(cfg.valuations, cfg.distortion, cfg.theta[i + 1], a, b)
    return sorted(set(pts))


def Phi(cfg, i, q, p, lo=0.0, density=None):
    """Unnormalized cumulative value int_{b(q)}^{top} J h db (equals c * int_0^q phi)."""
    from .quadrature import integrate

    density = density or (lambda rows, b: value_density(cfg, rows, b, p, lo))
    top = lo + p
    qs = np.atleast_1d(np.asarray(q, dtype=float))
    out = []
    for qq in qs:
        bq = float(quantile_valuation(cfg, i, qq, p, lo))
        out.append(integrate(lambda b: density(i, b), bq, top, density_breaks(cfg, i, bq, top),
                             cfg.tolerances.integration_tol))
    out = np.array(out)
    return out if np.ndim(q) else float(out[0])


def phi_table(cfg: ScenarioConfig, p: float, q_grid, lo: float = 0.0, density=None, order: int = 8):
    """Unnormalized Phi for every atom on a q grid.

    Returns (Phi, c) with Phi of shape (n_atoms, len(q_grid)); rows with no window mass are zero.
    The value density is integrated in b over panels between consecutive quantile points
    (plus kink points), which avoids the integrable singularity phi may have at q = 1.
    """
    density = density or (lambda rows, b: value_density(cfg, rows, b, p, lo))
    q_grid = np.asarray(q_grid, dtype=float)
    c = conditional_mass(cfg, np.arange(cfg.n_atoms), p, lo)
    top = lo + p
    out = np.zeros((cfg.n_atoms, len(q_grid)))
    for i in range(cfg.n_atoms):
        if c[i] <= 0:
            continue
        bq = quantile_valuation(cfg, i, q_grid, p, lo)
        pts = np.unique(np.concatenate([bq, density_breaks(cfg, i, lo, top), [lo, top]]))
        vals = panel_integrals(lambda x: density(i, x), pts, order)
        tail = np.concatenate([np.cumsum(vals[::-1])[::-1], [0.0]])  # int from pts[k] to top
        out[i] = tail[np.searchsorted(pts, bq)]
    return out, c


# ---------------------------------------------------------------------------
# support <-> allocation

def allocation_from_support(cfg: ScenarioConfig, i: int, support, p: float, lo: float = 0.0) -> StepAllocation:
    if len(support) > 2:
        raise ValueError("at most two support points are allowed")
    qs = [float(q) for q, _ in support]
    ws = [float(w) for _, w in support]
    if any(w < -1e-12 for w in ws) or abs(sum(ws) - 1.0) > 1e-9:
        raise ValueError("support weights must be nonnegative and sum to 1")
    cuts = tuple(float(quantile_valuation(cfg, i, q, p, lo)) for q in qs)
    return StepAllocation(cuts, tuple(ws), lo + p, lo)


def support_from_allocation(cfg, i, alloc: StepAllocation, p, lo=0.0):
    th = cfg.theta[i]
    fam = cfg.valuations
    H_lo = float(fam.cdf(th, lo))
    c = float(fam.cdf(th, lo + p)) - H_lo
    return [(1.0 - (float(fam.cdf(th, cut)) - H_lo) / c, w) for cut, w in zip(alloc.cutoffs, alloc.weights)]


# ---------------------------------------------------------------------------
# premiums

def _burden_weight(cfg, i):
    th = cfg.theta[i]
    return lambda b: 1.0 - cfg.distortion(cfg.valuations.cdf(th, b))


def rent_increment(cfg: ScenarioConfig, i: int, row: StepAllocation) -> float:
    """int (1 - x_i) [g(H_{i+1}) - g(H_i)] over the window: utility gain of atom i+1 over atom i."""
    g, fam = cfg.distortion, cfg.valuations
    th, th_up = cfg.theta[i], cfg.theta[i + 1]
    w = lambda b: g(fam.cdf(th_up, b)) - g(fam.cdf(th, b))
    return uncovered_integral(row, w, density_breaks(cfg, i, row.lo, row.top), cfg.tolerances.integration_tol)


def utilities_from_allocation(cfg: ScenarioConfig, alloc: Allocation, p: float, U_lo=None, lo: float = 0.0):
    """Equilibrium utility of every atom implied by the envelope identity (or full extraction when types are known)."""
    tol = cfg.tolerances.integration_tol
    n = cfg.n_atoms
    if cfg.known_type:
        return np.array([_window_outside_option(cfg, k, p, lo) for k in range(n)])
    if U_lo is None:
        U_lo = _window_outside_option(cfg, 0, p, lo)
    U = np.empty(n)
    U[0] = U_lo
    for k in range(1, n):
        U[k] = U[k - 1] + rent_increment(cfg, k - 1, alloc[k - 1])
    return U


def _window_outside_option(cfg, i, p, lo):
    if lo == 0.0:
        return outside_option(cfg.theta[i], p, cfg.beta, cfg.distortion, cfg.valuations,
                              cfg.tolerances.integration_tol)
    from .quadrature import integrate

    top = min(lo + p, cfg.b_max)
    if top <= lo:
        return 0.0
    return -integrate(_burden_weight(cfg, i), lo, top, density_breaks(cfg, i, lo, top), cfg.tolerances.integration_tol)


def premiums_from_allocation(cfg: ScenarioConfig, alloc: Allocation, p: float, U_lo=None, lo: float = 0.0):
    """Premium schedule t_i = -U_i - int (1 - x_i)[1 - g(H_i)]."""
    U = utilities_from_allocation(cfg, alloc, p, U_lo, lo)
    tol = cfg.tolerances.integration_tol
    t = np.empty(cfg.n_atoms)
    for k in range(cfg.n_atoms):
        row = alloc[k]
        burden = uncovered_integral(row, _burden_weight(cfg, k), density_breaks(cfg, k, row.lo, row.top), tol)
        t[k] = -U[k] - burden
    return t, U


def check_ic1(alloc: Allocation, b_grid=None):
    """Coverage must be nondecreasing in the type at every b. Returns (passed, witness or None)."""
    pts = set()
    for r in alloc.rows:
        pts.update(r.jump_points())
        pts.add(r.top)
        pts.add(r.lo)
    probe = set()
    for x in pts:
        probe.update((x, x + 1e-12, x - 1e-12))
    if b_grid is not None:
        probe.update(float(b) for b in np.asarray(b_grid))
    bs = np.array(sorted(probe))
    X = alloc.level_matrix(bs)
    for k in range(len(alloc.rows) - 1):
        d = X[k] - X[k + 1]
        j = int(np.argmax(d))
        if d[j] > 1e-12:
            return False, (alloc.thetas[k], alloc.thetas[k + 1], float(bs[j]))
    return True, None


# ---------------------------------------------------------------------------
# menus

@dataclass
class Menu:
    thetas: tuple
    contracts: list
    premiums: np.ndarray
    U_lo: float
    p: float
    lo: float = 0.0
    utilities: np.ndarray | None = field(default=None, repr=False)

    def allocation(self) -> Allocation:
        top = self.lo + self.p
        return Allocation(tuple(self.thetas), tuple(c.allocation(top, self.lo) for c in self.contracts))


def fmt(x) -> str:
    """Locale-independent 12-significant-digit float formatting."""
    if isinstance(x, str):
        return x
    x = float(x)
    if x == 0:
        return "0"
    return format(x, ".12g")


MENU_COLUMNS = ("theta", "contract_kind", "alpha", "D", "M", "premium")


def write_menu_csv(menu: Menu, path, scalars=None, tag: str | None = None):
    path = Path(path)
    cols = list(MENU_COLUMNS) + (["variant"] if tag else [])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for th, c, t in zip(menu.thetas, menu.contracts, menu.premiums):
            row = [fmt(th), c.kind, fmt(c.alpha), fmt(c.D), fmt(c.M), fmt(t)]
            if tag:
                row.append(tag)
            w.writerow(row)
        sc = {"p": menu.p, "U_lo": menu.U_lo}
        if menu.lo:
            sc["window_lo"] = menu.lo
        sc.update(scalars or {})
        for k, v in sc.items():
            fh.write(f"#{k},{fmt(v)}\n")


def read_menu_csv(path):
    """Return (Menu, scalars) from a menu CSV written by write_menu_csv."""
    rows, scalars = [], {}
    with Path(path).open() as fh:
        for line in fh:
            if line.startswith("#"):
                k, v = line[1:].strip().split(",", 1)
                try:
                    scalars[k] = float(v)
                except ValueError:
                    scalars[k] = v
            elif line.strip():
                rows.append(line)
    reader = csv.DictReader(rows)
    thetas, contracts, prem = [], [], []
    for r in reader:
        thetas.append(float(r["theta"]))
        kind = r["contract_kind"]
        if kind == "simple":
            contracts.append(SimpleDeductible(float(r["D"])))
        elif kind == "limited":
            contracts.append(LimitedCoverage(float(r["alpha"]), float(r["D"]), float(r["M"])))
        else:
            raise ValueError(f"unknown contract kind {kind!r}")
        prem.append(float(r["premium"]))
    if "p" not in scalars:
        raise ValueError("menu file lacks the #p scalar")
    menu = Menu(tuple(thetas), contracts, np.array(prem), float(scalars.get("U_lo", math.nan)),
                float(scalars["p"]), float(scalars.get("window_lo", 0.0)))
    return menu, scalars
