import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insuremkt import ScenarioError, dump_scenario, load_scenario, validate_primitives
from insuremkt.model_core import (
    BaseCDF,
    DistortionFn,
    MixtureFamily,
    ShiftedFamily,
    SupplyCurve,
    TypeDistribution,
    config_from_dict,
    config_to_dict,
)

from conftest import SCENARIOS, scenario

DOC = {
    "distortion": {"kind": "power", "s": 2},
    "valuations": {"kind": "mixture", "b_max": 1.0, "base": {"kind": "power", "k": 2}},
    "types": {"kind": "discrete", "atoms": [[0.25, 0.8], [0.35, 0.2]]},
    "supply": {"kind": "affine", "slope": 0.2847},
}


def test_two_type_document_builds_config():
    cfg = config_from_dict(DOC)
    assert cfg.n_atoms == 2
    assert np.allclose(cfg.theta, [0.25, 0.35])
    assert np.allclose(cfg.mass, [0.8, 0.2])
    assert cfg.distortion(0.5) == pytest.approx(0.25)
    assert cfg.H(0, 0.4) == pytest.approx(0.75 + 0.25 * 0.16)


def test_beta_defaults_to_zero():
    assert config_from_dict(DOC).beta == 0.0


def test_flat_supply_rejected():
    doc = dict(DOC, supply={"kind": "affine", "slope": 0.0})
    with pytest.raises(ScenarioError, match="supply not strictly increasing"):
        config_from_dict(doc)


def test_unknown_keys_rejected():
    with pytest.raises(ScenarioError, match="unknown"):
        config_from_dict(dict(DOC, extra=1))
    with pytest.raises(ScenarioError, match="unknown"):
        config_from_dict(dict(DOC, distortion={"kind": "power", "s": 2, "shape": 3}))
    with pytest.raises(ScenarioError, match="unknown"):
        config_from_dict(dict(DOC, variants={"auction": {}}))


def test_missing_block_rejected():
    doc = {k: v for k, v in DOC.items() if k != "supply"}
    with pytest.raises(ScenarioError, match="supply"):
        config_from_dict(doc)


def test_bad_grid_and_tolerance_rejected():
    with pytest.raises(ScenarioError, match="grids.n_q"):
        config_from_dict(dict(DOC, grids={"n_q": 2}))
    with pytest.raises(ScenarioError, match="tolerances"):
        config_from_dict(dict(DOC, tolerances={"lp_tol": 0.5}))


def test_quadratic_distortion_passes_validation():
    rep = validate_primitives(config_from_dict(DOC))
    assert rep.passed
    assert all(line.startswith("PASS") for line in rep.lines())


def test_tabulated_distortion_above_diagonal_fails():
    doc = dict(DOC, distortion={"kind": "tabulated", "knots": [[0, 0], [0.5, 0.6], [1, 1]]})
    rep = validate_primitives(config_from_dict(doc, validate=False))
    assert not rep.passed
    assert rep.first_failure() == "g(q) ≤ q violated at q=0.5"
    with pytest.raises(ScenarioError, match=r"g\(q\) ≤ q violated at q=0.5"):
        config_from_dict(doc)


def test_mixture_fosd_check_passes():
    rep = validate_primitives(scenario("calibrated_uniform"))
    check = next(c for c in rep.checks if c.name == "dH/dtheta <= 0")
    assert check.passed


def test_mixture_dtheta_equals_q_minus_one():
    base = BaseCDF("power", 1.0, k=2.0)
    fam = MixtureFamily(base)
    bs = np.linspace(0, 1, 101)
    for th in (0.1, 0.5, 0.9):
        assert np.max(np.abs(fam.dtheta(th, bs) - (base.cdf(bs) - 1.0))) <= 1e-10


@pytest.mark.parametrize("name", ["two_type", "calibrated_uniform", "tabulated", "variants"])
def test_inverse_round_trip(name):
    cfg = scenario(name)
    bs = np.linspace(0, cfg.b_max, cfg.grids.n_b)[1:-1]
    for th in cfg.theta[:: max(1, cfg.n_atoms // 5)]:
        assert np.max(np.abs(cfg.valuations.inv(th, cfg.valuations.cdf(th, bs)) - bs)) <= 1e-8


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.yaml")), ids=lambda p: p.stem)
def test_serialization_round_trip(path):
    cfg = load_scenario(path)
    again = load_scenario(dump_scenario(cfg))
    bs = np.linspace(0, cfg.b_max, 57)
    qs = np.linspace(0, 1, 33)
    ps = np.linspace(0, 2, 17)
    assert np.array_equal(cfg.theta, again.theta)
    assert np.max(np.abs(cfg.mass - again.mass)) <= 1e-12
    assert np.max(np.abs(cfg.distortion(qs) - again.distortion(qs))) <= 1e-12
    for th in cfg.theta:
        assert np.max(np.abs(cfg.valuations.cdf(th, bs) - again.valuations.cdf(th, bs))) <= 1e-12
        assert np.max(np.abs(cfg.valuations.pdf(th, bs) - again.valuations.pdf(th, bs))) <= 1e-12
    assert np.max(np.abs(cfg.supply(ps) - again.supply(ps))) <= 1e-12
    assert config_to_dict(again) == config_to_dict(cfg)


def test_uniform_discretization_masses():
    td = TypeDistribution("uniform", theta_lo=0.0, theta_hi=1.0)
    th, m = td.discretize(50)
    assert np.allclose(m, 0.02)
    assert th[0] == pytest.approx(0.01) and th[-1] == pytest.approx(0.99)


def test_tabulated_type_density_normalized():
    td = TypeDistribution("tabulated", density=((0.1, 1.4), (0.5, 1.0), (0.9, 0.6)))
    th, m = td.discretize(8)
    assert m.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(np.diff(m) < 0)


def test_supply_kinds():
    assert SupplyCurve("affine", slope=2.0)(0.3) == pytest.approx(0.6)
    assert SupplyCurve("power", scale=2.0, k=2.0)(0.5) == pytest.approx(0.5)
    tab = SupplyCurve("tabulated", knots=((0, 0), (1, 1), (2, 3)))
    assert tab(1.5) == pytest.approx(2.0)
    assert tab(3.0) == pytest.approx(5.0)  # linear extrapolation past the last knot
    assert tab.deriv(0.5) == pytest.approx(1.0)


def test_shifted_family_is_a_translation():
    fam = MixtureFamily(BaseCDF("power", 1.0, k=2.0))
    sh = ShiftedFamily(fam, 0.3)
    bs = np.linspace(0, 0.7, 29)
    assert np.allclose(sh.cdf(0.4, bs), fam.cdf(0.4, bs + 0.3))
    assert np.allclose(sh.pdf(0.4, bs[:-1]), fam.pdf(0.4, bs[:-1] + 0.3))
    assert sh.b_max == pytest.approx(0.7)


@settings(max_examples=60, deadline=None)
@given(s=st.floats(1.0, 5.0), q=st.floats(0.0, 1.0))
def test_power_distortion_below_diagonal(s, q):
    g = DistortionFn("power", s=s)
    assert g(q) <= q + 1e-15
    assert g(0.0) == 0.0 and g(1.0) == 1.0


@settings(max_examples=60, deadline=None)
@given(k=st.floats(0.3, 4.0), th=st.floats(0.05, 1.0), b1=st.floats(0.0, 1.0), b2=st.floats(0.0, 1.0))
def test_mixture_cdf_monotone_in_b_and_theta(k, th, b1, b2):
    fam = MixtureFamily(BaseCDF("power", 1.0, k=k))
    lo, hi = sorted((b1, b2))
    assert fam.cdf(th, lo) <= fam.cdf(th, hi) + 1e-15
    # higher theta is riskier: first-order stochastic dominance
    assert fam.cdf(min(th + 0.05, 1.0), lo) <= fam.cdf(th, lo) + 1e-15


def test_load_missing_file():
    with pytest.raises((ScenarioError, FileNotFoundError)):
        load_scenario(SCENARIOS / "nope.yaml")
