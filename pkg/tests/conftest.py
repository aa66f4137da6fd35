import sys
from pathlib import Path

import numpy as np
import pytest

from insuremkt import load_scenario
from insuremkt.model_core import (
    BaseCDF,
    DistortionFn,
    Grids,
    MixtureFamily,
    ScenarioConfig,
    SupplyCurve,
    TypeDistribution,
)

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"


def scenario(name, **changes):
    cfg = load_scenario(SCENARIOS / f"{name}.yaml")
    return cfg.with_changes(**changes) if changes else cfg


def mixture_cfg(s=2.0, k=1.0, atoms=None, uniform=None, mode="private_type", slope=0.6, beta=0.0,
                n_theta=12, n_q=101, n_p=15, b_max=1.0):
    """Small helper for building mixture-family scenarios in code."""
    if atoms is not None:
        types = TypeDistribution("discrete", atoms=tuple(tuple(a) for a in atoms))
    else:
        lo, hi = uniform or (0.2, 0.8)
        types = TypeDistribution("uniform", theta_lo=lo, theta_hi=hi)
    g = DistortionFn("power", s=s) if s != 1 else DistortionFn("identity")
    return ScenarioConfig(g, MixtureFamily(BaseCDF("power", b_max, k=k)), types, SupplyCurve("affine", slope=slope),
                          beta=beta, mode=mode, grids=Grids(n_theta=n_theta, n_q=n_q, n_p=n_p))


def random_cfg(rng: np.random.Generator, n_max=50, n_q=201):
    """Random mixture scenario with a supply curve placed so that mid-band prices are interior."""
    n = int(rng.integers(2, n_max + 1))
    thetas = np.sort(rng.uniform(0.05, 0.95, n))
    while np.any(np.diff(thetas) < 1e-3):
        thetas = np.sort(rng.uniform(0.05, 0.95, n))
    mass = rng.dirichlet(np.ones(n))
    atoms = tuple((float(t), float(m)) for t, m in zip(thetas, mass))
    mode = "known_type" if rng.random() < 0.3 else "private_type"
    return mixture_cfg(s=float(rng.uniform(1.0, 3.0)), k=float(rng.uniform(0.6, 2.5)), atoms=atoms, mode=mode,
                       slope=float(rng.uniform(0.3, 1.5)), beta=float(rng.choice([0.0, 0.0, 0.1])), n_q=n_q)


@pytest.fixture(scope="session")
def two_type():
    return scenario("two_type")


@pytest.fixture(scope="session")
def two_type_solution(two_type):
    from insuremkt import solve_first_stage

    return solve_first_stage(two_type, 0.8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda x: int(x.split()[1])):
            terminalreporter.write_line(line)
