"""Market primitives, the scenario file schema, and regularity checks.

A scenario bundles a probability distortion g, a family of valuation CDFs
H_theta on [0, b_max], a distribution of risk types (always materialized as
finitely many atoms), a service supply curve S, the uninsured markup beta,
grid sizes and numerical tolerances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml


class ScenarioError(ValueError):
    """Raised for malformed scenario documents or failed primitive checks."""


# ---------------------------------------------------------------------------
# piecewise-linear helpers

def _as_knots(knots, name):
    arr = np.asarray(knots, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise ScenarioError(f"{name}: knots must be a list of at least two [x, y] pairs")
    if np.any(np.diff(arr[:, 0]) <= 0):
        raise ScenarioError(f"{name}: knot abscissae must be strictly increasing")
    return arr[:, 0].copy(), arr[:, 1].copy()


def _pl_slope(x, xs, ys):
    """One-sided slope of the piecewise-linear interpolant (right slope, left at the end)."""
    x = np.asarray(x, dtype=float)
    k = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
    return (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k])


# ---------------------------------------------------------------------------
# distortion

@dataclass(frozen=True)
class DistortionFn:
    """Probability distortion g on [0, 1]."""

    kind: str = "identity"
    s: float = 1.0
    knots: tuple = ()

    def __post_init__(self):
        if self.kind not in ("identity", "power", "tabulated"):
            raise ScenarioError(f"distortion.kind: unknown kind {self.kind!r}")
        if self.kind == "power" and not self.s >= 1.0:
            raise ScenarioError("distortion.s must be >= 1")
        if self.kind == "tabulated":
            xs, ys = _as_knots(self.knots, "distortion")
            object.__setattr__(self, "_xs", xs)
            object.__setattr__(self, "_ys", ys)

    def __call__(self, q):
        q = np.clip(np.asarray(q, dtype=float), 0.0, 1.0)
        if self.kind == "identity":
            return q
        if self.kind == "power":
            return q**self.s
        return np.interp(q, self._xs, self._ys)

    def deriv(self, q):
        q = np.clip(np.asarray(q, dtype=float), 0.0, 1.0)
        if self.kind == "identity":
            return np.ones_like(q)
        if self.kind == "power":
            return self.s * q ** (self.s - 1.0)
        return _pl_slope(q, self._xs, self._ys)

    def kinks(self):
        """Interior points where g' may jump."""
        if self.kind == "tabulated":
            return self._xs[1:-1]
        return np.empty(0)

    def to_dict(self):
        if self.kind == "identity":
            return {"kind": "identity"}
        if self.kind == "power":
            return {"kind": "power", "s": float(self.s)}
        return {"kind": "tabulated", "knots": [[float(a), float(b)] for a, b in self.knots]}


# ---------------------------------------------------------------------------
# valuation families

@dataclass(frozen=True)
class BaseCDF:
    """CDF Q on [0, b_max] used by the mixture family."""

    kind: str
    b_max: float
    k: float = 1.0
    knots: tuple = ()

    def __post_init__(self):
        if self.kind not in ("power", "tabulated"):
            raise ScenarioError(f"valuations.base.kind: unknown kind {self.kind!r}")
        if not self.b_max > 0:
            raise ScenarioError("valuations.b_max must be positive")
        if self.kind == "power" and not self.k > 0:
            raise ScenarioError("valuations.base.k must be positive")
        if self.kind == "tabulated":
            xs, ys = _as_knots(self.knots, "valuations.base")
            if abs(xs[0]) > 0 or abs(xs[-1] - self.b_max) > 1e-12:
                raise ScenarioError("valuations.base: knots must span [0, b_max]")
            object.__setattr__(self, "_xs", xs)
            object.__setattr__(self, "_ys", ys)

    def cdf(self, b):
        b = np.clip(np.asarray(b, dtype=float), 0.0, self.b_max)
        if self.kind == "power":
            return (b / self.b_max) ** self.k
        return np.interp(b, self._xs, self._ys)

    def pdf(self, b):
        b = np.asarray(b, dtype=float)
        inside = (b >= 0) & (b < self.b_max)
        bc = np.clip(b, 0.0, self.b_max)
        if self.kind == "power":
            with np.errstate(divide="ignore", invalid="ignore"):
                d = self.k / self.b_max * (bc / self.b_max) ** (self.k - 1.0)
            d = np.where(np.isfinite(d), d, np.inf)
        else:
            d = _pl_slope(bc, self._xs, self._ys)
        return np.where(inside, d, 0.0)

    def inv(self, v):
        v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
        if self.kind == "power":
            return self.b_max * v ** (1.0 / self.k)
        return np.interp(v, self._ys, self._xs)

    def kinks(self):
        if self.kind == "tabulated":
            return self._xs[1:-1]
        return np.empty(0)

    def to_dict(self):
        if self.kind == "power":
            return {"kind": "power", "k": float(self.k)}
        return {"kind": "tabulated", "knots": [[float(a), float(b)] for a, b in self.knots]}


class ValuationFamily:
    """Interface for H_theta(b). Subclasses broadcast theta against b."""

    b_max: float

    def cdf(self, theta, b):  # pragma: no cover - interface
        raise NotImplementedError

    def pdf(self, theta, b):  # pragma: no cover
        raise NotImplementedError

    def dtheta(self, theta, b):  # pragma: no cover
        raise NotImplementedError

    def inv(self, theta, u):  # pragma: no cover
        raise NotImplementedError

    def kinks(self):
        return np.empty(0)


@dataclass(frozen=True)
class MixtureFamily(ValuationFamily):
    """H_theta(b) = 1 - theta + theta Q(b): a loss occurs with probability theta."""

    base: BaseCDF

    @property
    def b_max(self):
        return self.base.b_max

    def cdf(self, theta, b):
        theta = np.asarray(theta, dtype=float)
        b = np.asarray(b, dtype=float)
        return np.where(b < 0, 0.0, 1.0 - theta + theta * self.base.cdf(b))

    def pdf(self, theta, b):
        return np.asarray(theta, dtype=float) * self.base.pdf(b)

    def dtheta(self, theta, b):
        theta = np.asarray(theta, dtype=float)
        return self.base.cdf(b) - 1.0 + 0.0 * theta

    def inv(self, theta, u):
        theta = np.asarray(theta, dtype=float)
        u = np.asarray(u, dtype=float)
        return self.base.inv((u - 1.0 + theta) / theta)

    def kinks(self):
        return self.base.kinks()

    def to_dict(self):
        return {"kind": "mixture", "b_max": float(self.b_max), "base": self.base.to_dict()}


@dataclass(frozen=True)
class TabulatedFamily(ValuationFamily):
    """Bilinear interpolation of H on a theta x b table."""

    thetas: tuple
    bs: tuple
    table: tuple

    def __post_init__(self):
        th = np.asarray(self.thetas, dtype=float)
        bs = np.asarray(self.bs, dtype=float)
        H = np.asarray(self.table, dtype=float)
        if th.ndim != 1 or len(th) < 2 or np.any(np.diff(th) <= 0):
            raise ScenarioError("valuations.theta must be a strictly increasing list (>= 2 entries)")
        if bs.ndim != 1 or len(bs) < 2 or np.any(np.diff(bs) <= 0) or bs[0] != 0.0:
            raise ScenarioError("valuations.b must be strictly increasing and start at 0")
        if H.shape != (len(th), len(bs)):
            raise ScenarioError("valuations.H must have shape len(theta) x len(b)")
        object.__setattr__(self, "_th", th)
        object.__setattr__(self, "_bs", bs)
        object.__setattr__(self, "_H", H)

    @property
    def b_max(self):
        return float(self._bs[-1])

    def _locate(self, theta, b):
        theta, b = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(b, dtype=float))
        th, bs = self._th, self._bs
        k = np.clip(np.searchsorted(th, theta, side="right") - 1, 0, len(th) - 2)
        t = np.clip((theta - th[k]) / (th[k + 1] - th[k]), 0.0, 1.0)
        bc = np.clip(b, 0.0, bs[-1])
        j = np.clip(np.searchsorted(bs, bc, side="right") - 1, 0, len(bs) - 2)
        s = (bc - bs[j]) / (bs[j + 1] - bs[j])
        return k, t, j, s, b

    def cdf(self, theta, b):
        k, t, j, s, b = self._locate(theta, b)
        H = self._H
        lo = (1 - s) * H[k, j] + s * H[k, j + 1]
        hi = (1 - s) * H[k + 1, j] + s * H[k + 1, j + 1]
        out = (1 - t) * lo + t * hi
        return np.where(b < 0, 0.0, np.where(b >= self.b_max, 1.0, out))

    def pdf(self, theta, b):
        k, t, j, s, b = self._locate(theta, b)
        H, bs = self._H, self._bs
        d = ((1 - t) * (H[k, j + 1] - H[k, j]) + t * (H[k + 1, j + 1] - H[k + 1, j])) / (bs[j + 1] - bs[j])
        return np.where((b < 0) | (b >= self.b_max), 0.0, d)

    def dtheta(self, theta, b):
        k, t, j, s, b = self._locate(theta, b)
        H, th = self._H, self._th
        d = ((1 - s) * (H[k + 1, j] - H[k, j]) + s * (H[k + 1, j + 1] - H[k, j + 1])) / (th[k + 1] - th[k])
        return np.where((b < 0) | (b >= self.b_max), 0.0, d)

    def inv(self, theta, u):
        theta, u = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(u, dtype=float))
        out = np.empty(theta.shape)
        for th in np.unique(theta):
            mask = theta == th
            row = self.cdf(th, self._bs)
            out[mask] = np.interp(u[mask], row, self._bs)
        return out

    def kinks(self):
        return self._bs[1:-1]

    def to_dict(self):
        return {
            "kind": "tabulated",
            "theta": [float(x) for x in self._th],
            "b": [float(x) for x in self._bs],
            "H": [[float(x) for x in row] for row in self._H],
        }


@dataclass(frozen=True)
class ShiftedFamily(ValuationFamily):
    """H'_theta(b) = H_theta(shift + b); used for the upper service window."""

    parent: Any
    shift: float

    @property
    def b_max(self):
        return self.parent.b_max - self.shift

    def cdf(self, theta, b):
        b = np.asarray(b, dtype=float)
        return np.where(b < 0, 0.0, self.parent.cdf(theta, b + self.shift))

    def pdf(self, theta, b):
        b = np.asarray(b, dtype=float)
        return np.where(b < 0, 0.0, self.parent.pdf(theta, b + self.shift))

    def dtheta(self, theta, b):
        return self.parent.dtheta(theta, np.asarray(b, dtype=float) + self.shift)

    def inv(self, theta, u):
        return np.maximum(self.parent.inv(theta, u) - self.shift, 0.0)

    def kinks(self):
        k = np.asarray(self.parent.kinks()) - self.shift
        return k[(k > 0) & (k < self.b_max)]

    def to_dict(self):
        raise ScenarioError("shifted families are internal and cannot be serialized")


# ---------------------------------------------------------------------------
# types

@dataclass(frozen=True)
class TypeDistribution:
    """Risk-type distribution; continuous kinds are discretized into midpoint atoms."""

    kind: str
    atoms: tuple = ()
    theta_lo: float = 0.0
    theta_hi: float = 1.0
    density: tuple = ()

    def __post_init__(self):
        if self.kind not in ("discrete", "uniform", "tabulated"):
            raise ScenarioError(f"types.kind: unknown kind {self.kind!r}")
        if self.kind == "discrete":
            arr = np.asarray(self.atoms, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 1:
                raise ScenarioError("types.atoms must be a list of [theta, mass] pairs")
            object.__setattr__(self, "theta_lo", float(arr[0, 0]))
            object.__setattr__(self, "theta_hi", float(arr[-1, 0]))
        elif self.kind == "tabulated":
            xs, ys = _as_knots(self.density, "types.density")
            object.__setattr__(self, "theta_lo", float(xs[0]))
            object.__setattr__(self, "theta_hi", float(xs[-1]))
        elif not self.theta_hi > self.theta_lo:
            raise ScenarioError("types: theta_hi must exceed theta_lo")

    def cdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.kind == "uniform":
            return np.clip((theta - self.theta_lo) / (self.theta_hi - self.theta_lo), 0.0, 1.0)
        if self.kind == "tabulated":
            xs, ys = _as_knots(self.density, "types.density")
            seg = 0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)
            cum = np.concatenate([[0.0], np.cumsum(seg)])
            total = cum[-1]
            tc = np.clip(theta, xs[0], xs[-1])
            k = np.clip(np.searchsorted(xs, tc, side="right") - 1, 0, len(xs) - 2)
            dx = tc - xs[k]
            slope = (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k])
            return (cum[k] + ys[k] * dx + 0.5 * slope * dx**2) / total
        raise ScenarioError("cdf is only defined for continuous type distributions")

    def discretize(self, n_theta: int):
        """Return (theta, mass) atom arrays."""
        if self.kind == "discrete":
            arr = np.asarray(self.atoms, dtype=float)
            return arr[:, 0].copy(), arr[:, 1].copy()
        edges = np.linspace(self.theta_lo, self.theta_hi, n_theta + 1)
        theta = 0.5 * (edges[1:] + edges[:-1])
        mass = np.diff(self.cdf(edges))
        return theta, mass

    def to_dict(self):
        if self.kind == "discrete":
            return {"kind": "discrete", "atoms": [[float(a), float(b)] for a, b in self.atoms]}
        if self.kind == "uniform":
            return {"kind": "uniform", "theta_lo": float(self.theta_lo), "theta_hi": float(self.theta_hi)}
        return {"kind": "tabulated", "density": [[float(a), float(b)] for a, b in self.density]}


# ---------------------------------------------------------------------------
# supply

@dataclass(frozen=True)
class SupplyCurve:
    kind: str
    slope: float = 1.0
    scale: float = 1.0
    k: float = 1.0
    knots: tuple = ()

    def __post_init__(self):
        if self.kind not in ("affine", "power", "tabulated"):
            raise ScenarioError(f"supply.kind: unknown kind {self.kind!r}")
        if self.kind == "tabulated":
            xs, ys = _as_knots(self.knots, "supply")
            object.__setattr__(self, "_xs", xs)
            object.__setattr__(self, "_ys", ys)

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        if self.kind == "affine":
            return self.slope * p
        if self.kind == "power":
            return self.scale * np.maximum(p, 0.0) ** self.k
        xs, ys = self._xs, self._ys
        inner = np.interp(p, xs, ys)
        s_hi = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        return np.where(p > xs[-1], ys[-1] + s_hi * (p - xs[-1]), inner)

    def deriv(self, p):
        p = np.asarray(p, dtype=float)
        if self.kind == "affine":
            return self.slope + 0.0 * p
        if self.kind == "power":
            with np.errstate(divide="ignore"):
                return self.scale * self.k * np.maximum(p, 0.0) ** (self.k - 1.0)
        return _pl_slope(np.minimum(p, self._xs[-1]), self._xs, self._ys)

    def to_dict(self):
        if self.kind == "affine":
            return {"kind": "affine", "slope": float(self.slope)}
        if self.kind == "power":
            return {"kind": "power", "scale": float(self.scale), "k": float(self.k)}
        return {"kind": "tabulated", "knots": [[float(a), float(b)] for a, b in self.knots]}


# ---------------------------------------------------------------------------
# scenario

@dataclass(frozen=True)
class Grids:
    n_theta: int = 50
    n_b: int = 401
    n_q: int = 201
    n_p: int = 41


@dataclass(frozen=True)
class Tolerances:
    integration_tol: float = 1e-8
    bisection_tol: float = 1e-10
    lp_tol: float = 1e-9
    ic_tol: float = 1e-7


MODES = ("private_type", "known_type")


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete, immutable market primitives plus materialized type atoms."""

    distortion: DistortionFn
    valuations: ValuationFamily
    types: TypeDistribution
    supply: SupplyCurve
    beta: float = 0.0
    mode: str = "private_type"
    grids: Grids = field(default_factory=Grids)
    tolerances: Tolerances = field(default_factory=Tolerances)
    variants: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScenarioError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if not self.beta >= 0:
            raise ScenarioError("beta must be nonnegative")
        theta, mass = self.types.discretize(self.grids.n_theta)
        theta.setflags(write=False)
        mass.setflags(write=False)
        above = np.concatenate([np.cumsum(mass[::-1])[::-1][1:], [0.0]])
        above.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "mass_above", above)

    # convenience accessors -------------------------------------------------
    @property
    def n_atoms(self) -> int:
        return len(self.theta)

    @property
    def b_max(self) -> float:
        return float(self.valuations.b_max)

    @property
    def known_type(self) -> bool:
        return self.mode == "known_type"

    def H(self, i, b):
        return self.valuations.cdf(self.theta[i], b)

    def h(self, i, b):
        return self.valuations.pdf(self.theta[i], b)

    def with_changes(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# schema

_SCHEMA = {
    "distortion": {"kind", "s", "knots"},
    "valuations": {"kind", "b_max", "base", "theta", "b", "H"},
    "valuations.base": {"kind", "k", "knots"},
    "types": {"kind", "atoms", "theta_lo", "theta_hi", "density"},
    "supply": {"kind", "slope", "scale", "k", "knots", "intercept"},
    "grids": {f.name for f in fields(Grids)},
    "tolerances": {f.name for f in fields(Tolerances)},
    "variants": {"planner", "bargain", "tiers"},
    "variants.planner": {"delta", "omega", "U_bar"},
    "variants.bargain": {"beta_bargain", "capacity", "provider_mc", "prices"},
    "variants.tiers": {"b_star", "supply_1", "supply_2", "p1", "p2"},
}
_TOP = {"distortion", "valuations", "types", "supply", "beta", "mode", "grids", "tolerances", "variants"}
_REQUIRED = ("distortion", "valuations", "types", "supply")


def _check_keys(block, name):
    if not isinstance(block, dict):
        raise ScenarioError(f"{name}: expected a mapping")
    extra = set(block) - _SCHEMA[name]
    if extra:
        raise ScenarioError(f"{name}: unknown key(s) {sorted(extra)}")


def _need(block, key, name):
    if key not in block:
        raise ScenarioError(f"{name}.{key}: required field missing")
    return block[key]


def _pairs(v):
    return tuple(tuple(float(x) for x in pair) for pair in v)


def distortion_from_dict(d) -> DistortionFn:
    _check_keys(d, "distortion")
    kind = _need(d, "kind", "distortion")
    if kind == "power":
        return DistortionFn("power", s=float(_need(d, "s", "distortion")))
    if kind == "tabulated":
        return DistortionFn("tabulated", knots=_pairs(_need(d, "knots", "distortion")))
    return DistortionFn(kind)


def valuations_from_dict(d) -> ValuationFamily:
    _check_keys(d, "valuations")
    kind = _need(d, "kind", "valuations")
    if kind == "mixture":
        b_max = float(_need(d, "b_max", "valuations"))
        base = _need(d, "base", "valuations")
        _check_keys(base, "valuations.base")
        bkind = _need(base, "kind", "valuations.base")
        if bkind == "power":
            return MixtureFamily(BaseCDF("power", b_max, k=float(_need(base, "k", "valuations.base"))))
        return MixtureFamily(BaseCDF(bkind, b_max, knots=_pairs(_need(base, "knots", "valuations.base"))))
    if kind == "tabulated":
        return TabulatedFamily(
            tuple(float(x) for x in _need(d, "theta", "valuations")),
            tuple(float(x) for x in _need(d, "b", "valuations")),
            tuple(tuple(float(x) for x in row) for row in _need(d, "H", "valuations")),
        )
    raise ScenarioError(f"valuations.kind: unknown kind {kind!r}")


def types_from_dict(d) -> TypeDistribution:
    _check_keys(d, "types")
    kind = _need(d, "kind", "types")
    if kind == "discrete":
        return TypeDistribution("discrete", atoms=_pairs(_need(d, "atoms", "types")))
    if kind == "uniform":
        return TypeDistribution(
            "uniform",
            theta_lo=float(_need(d, "theta_lo", "types")),
            theta_hi=float(_need(d, "theta_hi", "types")),
        )
    if kind == "tabulated":
        return TypeDistribution("tabulated", density=_pairs(_need(d, "density", "types")))
    raise ScenarioError(f"types.kind: unknown kind {kind!r}")


def supply_from_dict(d, name="supply") -> SupplyCurve:
    if not isinstance(d, dict):
        raise ScenarioError(f"{name}: expected a mapping")
    extra = set(d) - _SCHEMA["supply"]
    if extra:
        raise ScenarioError(f"{name}: unknown key(s) {sorted(extra)}")
    kind = _need(d, "kind", name)
    if kind == "affine":
        if float(d.get("intercept", 0.0)) != 0.0:
            raise ScenarioError(f"{name}.intercept: affine supply must pass through the origin")
        return SupplyCurve("affine", slope=float(_need(d, "slope", name)))
    if kind == "power":
        return SupplyCurve("power", scale=float(_need(d, "scale", name)), k=float(_need(d, "k", name)))
    if kind == "tabulated":
        return SupplyCurve("tabulated", knots=_pairs(_need(d, "knots", name)))
    raise ScenarioError(f"{name}.kind: unknown kind {kind!r}")


def _check_variants(v):
    _check_keys(v, "variants")
    for key, block in v.items():
        _check_keys(block, f"variants.{key}")


def config_from_dict(doc: dict, validate: bool = True) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a mapping")
    extra = set(doc) - _TOP
    if extra:
        raise ScenarioError(f"unknown top-level key(s) {sorted(extra)}")
    for key in _REQUIRED:
        if key not in doc:
            raise ScenarioError(f"{key}: required block missing")
    grids = doc.get("grids", {}) or {}
    _check_keys(grids, "grids")
    tols = doc.get("tolerances", {}) or {}
    _check_keys(tols, "tolerances")
    variants = doc.get("variants", {}) or {}
    _check_variants(variants)
    g = Grids(**{k: int(v) for k, v in grids.items()})
    for k, v in vars(g).items():
        if v < 3:
            raise ScenarioError(f"grids.{k}: must be at least 3, got {v}")
    t = Tolerances(**{k: float(v) for k, v in tols.items()})
    for k, v in vars(t).items():
        if not 0 < v <= 1e-2:
            raise ScenarioError(f"tolerances.{k}: must lie in (0, 1e-2], got {v}")
    cfg = ScenarioConfig(
        distortion=distortion_from_dict(doc["distortion"]),
        valuations=valuations_from_dict(doc["valuations"]),
        types=types_from_dict(doc["types"]),
        supply=supply_from_dict(doc["supply"]),
        beta=float(doc.get("beta", 0.0) or 0.0),
        mode=str(doc.get("mode", "private_type")),
        grids=g,
        tolerances=t,
        variants=variants,
    )
    if validate:
        report = validate_primitives(cfg)
        if not report.passed:
            raise ScenarioError(report.first_failure())
    return cfg


def config_to_dict(cfg: ScenarioConfig) -> dict:
    doc = {
        "distortion": cfg.distortion.to_dict(),
        "valuations": cfg.valuations.to_dict(),
        "types": cfg.types.to_dict(),
        "supply": cfg.supply.to_dict(),
        "beta": float(cfg.beta),
        "mode": cfg.mode,
        "grids": dict(vars(cfg.grids)),
        "tolerances": dict(vars(cfg.tolerances)),
    }
    if cfg.variants:
        doc["variants"] = cfg.variants
    return doc


def load_scenario(source, validate: bool = True) -> ScenarioConfig:
    """Load a scenario from a path, a YAML string, or an already-parsed mapping."""
    if isinstance(source, dict):
        doc = source
    else:
        text = source
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
            text = Path(source).read_text()
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"scenario is not valid YAML: {exc}") from exc
    return config_from_dict(doc, validate=validate)


def dump_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


# ---------------------------------------------------------------------------
# validation

@dataclass
class Check:
    name: str
    passed: bool
    worst: float = 0.0
    where: str = ""
    fail_message: str = ""


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def first_failure(self) -> str:
        for c in self.checks:
            if not c.passed:
                if c.fail_message:
                    return c.fail_message + (f" at {c.where}" if c.where else "")
                return f"{c.name} violated at {c.where}" if c.where else f"{c.name} violated"
        return ""

    def lines(self):
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            loc = f" at {c.where}" if c.where else ""
            yield f"{status} {c.name} (worst {c.worst:.3g}{loc})"


def _worst(viol, grid, label):
    """Return (worst violation, location string) for a violation array (positive = bad)."""
    viol = np.asarray(viol, dtype=float)
    if viol.size == 0:
        return 0.0, ""
    k = int(np.argmax(viol))
    return float(viol.flat[k]), f"{label}={float(np.asarray(grid).flat[k]):.6g}"


def validate_primitives(cfg: ScenarioConfig) -> ValidationReport:
    checks = []
    eps = 1e-12
    g = cfg.distortion
    qs = np.unique(np.concatenate([np.linspace(0, 1, 4 * cfg.grids.n_b + 1), g.kinks()]))
    gv = g(qs)
    ends = max(abs(float(g(0.0))), abs(float(g(1.0)) - 1.0))
    checks.append(Check("g(0)=0 and g(1)=1", ends <= eps, ends))
    w, loc = _worst(-np.diff(gv), qs[1:], "q")
    checks.append(Check("g nondecreasing", w <= eps, w, loc if w > eps else ""))
    w, loc = _worst(gv - qs, qs, "q")
    checks.append(Check("g(q) ≤ q", w <= eps, w, loc if w > eps else ""))
    gd = g.deriv(qs)
    bad = ~np.isfinite(gd) | (gd < 0)
    checks.append(Check("g' nonnegative and finite", not bad.any(), float(bad.sum()),
                        f"q={qs[np.argmax(bad)]:.6g}" if bad.any() else ""))

    fam = cfg.valuations
    bmax = cfg.b_max
    bs = np.linspace(0.0, bmax, cfg.grids.n_b)
    interior = bs[1:-1]
    th = cfg.theta[:, None]
    Hg = fam.cdf(th, bs[None, :])
    w = float(np.max(-np.diff(Hg, axis=1)))
    checks.append(Check("H nondecreasing in b", w <= eps, w))
    top = float(np.max(np.abs(fam.cdf(cfg.theta, bmax) - 1.0)))
    checks.append(Check("H(b_max)=1", top <= 1e-12, top))
    dth = fam.dtheta(th, interior[None, :])
    w, loc = _worst(dth, np.broadcast_to(interior, dth.shape), "b")
    checks.append(Check("dH/dtheta <= 0", w <= eps, w, loc if w > eps else ""))
    hv = fam.pdf(th, interior[None, :])
    w, loc = _worst(-hv, np.broadcast_to(interior, hv.shape), "b")
    checks.append(Check("h > 0 on (0, b_max)", bool(np.all(hv > 0)), max(w, 0.0),
                        loc if not np.all(hv > 0) else ""))
    rt = np.abs(fam.inv(th, fam.cdf(th, interior[None, :])) - interior[None, :])
    w, loc = _worst(rt, np.broadcast_to(interior, rt.shape), "b")
    checks.append(Check("inverse round trip", w <= 1e-8, w, loc if w > 1e-8 else ""))

    mass = cfg.mass
    sm = abs(float(mass.sum()) - 1.0)
    checks.append(Check("type masses sum to 1", sm <= 1e-12, sm))
    checks.append(Check("type masses positive", bool(np.all(mass > 0)), float(-mass.min())))
    inc = len(cfg.theta) == 1 or bool(np.all(np.diff(cfg.theta) > 0))
    checks.append(Check("theta grid strictly increasing", inc))
    prange = bool(np.all((cfg.theta > 0) & (cfg.theta <= 1))) if isinstance(fam, MixtureFamily) else True
    checks.append(Check("mixture weights theta in (0, 1]", prange))

    S = cfg.supply
    p_hi = _supply_horizon(S)
    ps = np.linspace(0.0, p_hi, cfg.grids.n_b)
    sv = S(ps)
    checks.append(Check("S(0)=0", abs(float(S(0.0))) <= eps, abs(float(S(0.0)))))
    w, loc = _worst(-np.diff(sv), ps[1:], "p")
    checks.append(Check("supply strictly increasing", w < 0, w, loc if w >= 0 else "",
                        fail_message="supply not strictly increasing"))
    sd = S.deriv(ps[1:])
    ok = bool(np.all(np.isfinite(sd) & (sd > 0)))
    checks.append(Check("S' positive and finite", ok))
    return ValidationReport(checks)


def _supply_horizon(S: SupplyCurve) -> float:
    """A price comfortably past where supply reaches total mass 1."""
    p = 1.0
    for _ in range(60):
        if float(S(p)) > 1.0 or not math.isfinite(float(S(p))):
            break
        p *= 2.0
    return 2.0 * p
