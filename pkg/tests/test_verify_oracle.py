from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from scipy.optimize import linprog

from insuremkt import solve_first_stage
from insuremkt.market import price_band
from insuremkt.verify_oracle import (
    DiscreteOTInstance,
    InfeasibleError,
    augmented_grid,
    build_instance,
    complementary_slackness_check,
    coupling_from_solution,
    dual_certificate,
    finite_difference,
    ic_brute_force,
    solve_primal_exact,
)

from conftest import random_cfg, scenario


def small_instance(rs=0.5):
    q = np.array([0.0, 0.5, 1.0])
    Phi = np.array([[0.0, 1.0, 1.5], [0.0, 1.0, 2.0]])
    return DiscreteOTInstance(np.array([0.5, 0.5]), q, Phi, np.vstack([q, q]), rs)


def linprog_value(inst):
    n, m = inst.Phi.shape
    c = -(inst.Phi.ravel())
    A_eq = np.zeros((n + 1, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    A_eq[n] = inst.C.ravel()
    b_eq = np.concatenate([inst.masses, [inst.rs]])
    res = linprog(c, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    assert res.status == 0
    return -res.fun


def test_small_instance_value():
    res = solve_primal_exact(small_instance())
    assert res.value_exact == Fraction(1)
    assert res.lambda_exact == Fraction(-2)
    assert res.value == pytest.approx(linprog_value(small_instance()), abs=1e-12)


def test_small_instance_dual_and_slackness():
    inst = small_instance()
    res = solve_primal_exact(inst)
    cert = dual_certificate(inst, res.lambda_exact)
    assert cert.value_exact == res.value_exact
    rep = complementary_slackness_check(inst, res.coupling, res.lambda_star)
    assert rep.passed and rep.flagged_rows == []


def test_weak_duality_for_any_multiplier():
    inst = small_instance()
    res = solve_primal_exact(inst)
    for lam in (-5.0, -2.5, -1.0, 0.0, 1.0):
        assert dual_certificate(inst, lam).value >= res.value - 1e-12


def test_slackness_violation_flagged():
    inst = small_instance()
    bad = np.array([[0.0, 0.0, 0.5], [0.5, 0.0, 0.0]])  # row 0 at q = 1 loses 0.5 at lam = -2
    rep = complementary_slackness_check(inst, bad, -2.0)
    assert not rep.passed and rep.flagged_rows == [0]
    assert rep.worst_gap == pytest.approx(0.5)


def test_coupling_marginals_checked():
    with pytest.raises(ValueError, match="marginals"):
        complementary_slackness_check(small_instance(), np.zeros((2, 3)), -2.0)


def test_infeasible_residual_supply():
    with pytest.raises(InfeasibleError):
        solve_primal_exact(small_instance(rs=1.5))


def test_instance_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        DiscreteOTInstance(np.array([0.5, 0.6]), np.zeros(3), np.zeros((2, 3)), np.zeros((2, 3)), 0.1)
    with pytest.raises(ValueError, match="finite"):
        DiscreteOTInstance(np.array([0.5, 0.5]), np.zeros(3), np.full((2, 3), np.nan), np.zeros((2, 3)), 0.1)


def test_exact_lp_matches_linprog_on_random_instances():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n, m = int(rng.integers(2, 6)), int(rng.integers(3, 9))
        q = np.linspace(0, 1, m)
        c = rng.uniform(0.2, 1.0, n)
        Phi = np.cumsum(rng.normal(size=(n, m)), axis=1)
        Phi[:, 0] = 0.0
        mass = rng.dirichlet(np.ones(n))
        rs = float(mass @ c) * rng.uniform(0.1, 0.9)
        inst = DiscreteOTInstance(mass, q, Phi, c[:, None] * q[None, :], rs)
        res = solve_primal_exact(inst)
        assert res.value == pytest.approx(linprog_value(inst), abs=1e-9)
        assert dual_certificate(inst, res.lambda_exact).value == pytest.approx(res.value, abs=1e-12)


def test_solver_on_scenario_instance_matches_linprog(two_type):
    inst = build_instance(two_type, 0.8)
    sol = solve_first_stage(two_type, 0.8, refine=False)
    assert sol.lagrangian_value == pytest.approx(linprog_value(inst), abs=1e-9)
    rep = complementary_slackness_check(inst, coupling_from_solution(sol), sol.lambda_star, 1e-9)
    assert rep.passed


def test_refined_solution_on_augmented_grid(two_type, two_type_solution):
    q = augmented_grid(two_type_solution)
    inst = build_instance(two_type, 0.8, q)
    rep = complementary_slackness_check(inst, coupling_from_solution(two_type_solution, q),
                                        two_type_solution.lambda_star, 1e-7)
    assert rep.passed
    assert solve_primal_exact(inst).value == pytest.approx(two_type_solution.lagrangian_value, abs=1e-7)


def test_solver_menus_pass_brute_force_ic():
    rng = np.random.default_rng(2)
    for _ in range(4):
        cfg = random_cfg(rng, n_max=6, n_q=81)
        band = price_band(cfg)
        sol = solve_first_stage(cfg, band.p_N + 0.4 * (band.p_F - band.p_N))
        rep = ic_brute_force(sol.menu, cfg)
        assert rep.worst_ir_violation <= 1e-7 and rep.worst_ic2_violation <= 1e-7
        if not cfg.known_type and sol.ic1_pass:
            assert rep.worst_ic1_violation <= 1e-7


def test_premium_increase_breaks_participation(two_type, two_type_solution):
    menu = two_type_solution.menu
    bumped = replace(menu, premiums=menu.premiums + np.array([0.05, 0.0]))
    rep = ic_brute_force(bumped, two_type)
    assert rep.worst_ir_violation == pytest.approx(0.05, abs=1e-7)
    assert rep.ir_type == pytest.approx(0.25)


def test_cheaper_high_contract_breaks_ic1(two_type, two_type_solution):
    menu = two_type_solution.menu
    cheap = replace(menu, premiums=menu.premiums - np.array([0.0, 0.2]))
    rep = ic_brute_force(cheap, two_type)
    assert rep.worst_ic1_violation > 0.1
    assert rep.ic1_pair == (0, 1)


def test_finite_difference_guards():
    assert finite_difference(lambda p: p * p, 0.5, 1e-3) == pytest.approx(1.0)
    with pytest.raises(ValueError, match="positive"):
        finite_difference(lambda p: p, 0.5, 0.0)
    band = price_band(scenario("two_type"))
    with pytest.raises(ValueError, match="band"):
        finite_difference(lambda p: p, band.p_F, 1e-3, band)
