"""Scenario runner: ``solve <pipeline> --scenario FILE [--price P] [--out DIR] [--override key=value ...]``."""
from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from .model_core import ScenarioError, config_from_dict, validate_primitives
from .screening import fmt, read_menu_csv, write_menu_csv

PIPELINES = ("validate", "first-stage", "sweep", "optimize", "verify", "planner", "bargain", "tiers")
OUT_ENV = "INSUREMKT_OUT"


class VerificationFailed(Exception):
    pass


def _witness(w):
    lo, hi, b = w
    return f"theta={fmt(lo)} covered more than theta={fmt(hi)} at b={fmt(b)}"


# ---------------------------------------------------------------------------
# request handling

def apply_override(doc: dict, item: str):
    """Set a dotted key in the raw scenario document; values are parsed as YAML scalars or lists."""
    if "=" not in item:
        raise ScenarioError(f"override {item!r}: expected key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"override {key}: cannot parse value {raw!r}") from exc
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ScenarioError(f"override {key}: {part} is not a mapping")
        node = nxt
    old = node.get(parts[-1])
    if isinstance(old, (int, float)) and not isinstance(old, bool) and not isinstance(value, (int, float)):
        raise ScenarioError(f"override {key}: expected a number, got {raw!r}")
    node[parts[-1]] = value


def load_request(scenario: str, overrides):
    path = Path(scenario)
    if not path.is_file():
        raise ScenarioError(f"scenario file not found: {scenario}")
    doc = yaml.safe_load(path.read_text()) or {}
    price = None
    for item in overrides:
        if item.split("=", 1)[0].strip() in ("p", "price"):
            price = float(item.split("=", 1)[1])
            continue
        apply_override(doc, item)
    return doc, price


class Writer:
    """All file output goes through here so concurrent solves never touch the filesystem."""

    def __init__(self, out: Path):
        self.out = out
        self.report: list[tuple[str, bool, str]] = []
        out.mkdir(parents=True, exist_ok=True)

    def table(self, name, header, rows, footer=None):
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(x) for x in r])
            for k, v in (footer or {}).items():
                fh.write(f"#{k},{fmt(v)}\n")
        return path

    def menu(self, menu, scalars=None, name="menu.csv", tag=None):
        write_menu_csv(menu, self.out / name, scalars, tag)

    def check(self, name, ok, detail=""):
        self.report.append((name, bool(ok), detail))

    def flush_report(self):
        fails = sum(1 for _, ok, _ in self.report if not ok)
        lines = [f"{'PASS' if ok else 'FAIL'} {name}" + (f": {d}" if d else "") for name, ok, d in self.report]
        lines.append(f"failures: {fails}")
        (self.out / "verify.txt").write_text("\n".join(lines) + "\n")
        return fails


# ---------------------------------------------------------------------------
# plot data

def _plot_first_stage(wr: Writer, sol, prefix=""):
    prob = sol.problem
    rows = []
    for i in range(len(prob.c)):
        v = prob.hulls[i]
        env = np.interp(prob.q, prob.q[v], prob.Psi[i, v])
        for j, q in enumerate(prob.q):
            rows.append((i, prob.cfg.theta[i], q, prob.Psi[i, j] * prob.c[i], env[j] * prob.c[i]))
    wr.table(f"plots/{prefix}phi_hull.csv", ["atom", "theta", "q", "Phi", "hull"], rows)
    steps = []
    for i, r in enumerate(sol.allocation.rows):
        for a, b, lev in r.steps():
            steps.append((i, prob.cfg.theta[i], a, b, lev))
    wr.table(f"plots/{prefix}allocation.csv", ["atom", "theta", "b_start", "b_end", "x"], steps)


def _first_stage_checks(wr: Writer, cfg, sol, tag=""):
    from .verify_oracle import ic_brute_force

    tol = cfg.tolerances.ic_tol
    gap_scale = 1e-8 * max(1.0, abs(sol.rs))
    wr.check(f"{tag}market_clearing", abs(sol.clearing_gap) <= gap_scale, f"gap={fmt(sol.clearing_gap)}")
    rep = ic_brute_force(sol.menu, cfg, sol.p)
    if cfg.known_type:
        # types are observed: only truthful loss reports and participation matter
        worst = max(rep.worst_ic2_violation, rep.worst_ir_violation)
        wr.check(f"{tag}ic_brute_force", worst <= tol,
                 f"ic2={fmt(rep.worst_ic2_violation)} ir={fmt(rep.worst_ir_violation)}")
        return
    wr.check(f"{tag}ic1_monotone", sol.ic1_pass, "" if sol.ic1_pass else _witness(sol.ic1_witness))
    wr.check(f"{tag}ic_brute_force", rep.passed(tol),
             f"ic1={fmt(rep.worst_ic1_violation)} ic2={fmt(rep.worst_ic2_violation)} ir={fmt(rep.worst_ir_violation)}")


def _sweep_rows(rows):
    return [(r.p, r.profit, r.profit_derivative, r.lambda_star, r.clearing_gap, r.n_covered_types) for r in rows]


SWEEP_HEADER = ["p", "profit", "profit_derivative", "lambda_star", "clearing_gap", "n_covered_types"]


# ---------------------------------------------------------------------------
# pipelines

def _price(cfg, price, supply=None, lo=0.0):
    from .market import price_band

    band = price_band(cfg, supply, lo)
    if price is None:
        return 0.5 * (band.p_N + band.p_F), band
    return price, band


def run_validate(cfg, wr, price, opts):
    rep = validate_primitives(cfg)
    for c in rep.checks:
        where = f" at {c.where}" if c.where else ""
        detail = f"worst {c.worst:.3g}{where}" if c.passed or not c.fail_message else c.fail_message + where
        wr.check(c.name, c.passed, detail)


def run_first_stage(cfg, wr, price, opts):
    from .first_stage import solve_first_stage

    p, band = _price(cfg, price)
    sol = solve_first_stage(cfg, p)
    wr.menu(sol.menu, {"lambda_star": sol.lambda_star, "profit": sol.profit})
    _plot_first_stage(wr, sol)
    _first_stage_checks(wr, cfg, sol)


def run_sweep(cfg, wr, price, opts):
    from .second_stage import sweep_prices

    _, band = _price(cfg, price)
    rows = sweep_prices(cfg, band.grid(cfg.grids.n_p), opts["workers"])
    wr.table("sweep.csv", SWEEP_HEADER, _sweep_rows(rows), {"p_N": band.p_N, "p_F": band.p_F})
    wr.table("plots/profit.csv", ["p", "profit"], [(r.p, r.profit) for r in rows])
    wr.table("plots/profit_derivative.csv", ["p", "profit_derivative"], [(r.p, r.profit_derivative) for r in rows])
    wr.check("sweep_clearing", all(abs(r.clearing_gap) <= 1e-7 for r in rows))


def run_optimize(cfg, wr, price, opts):
    from .first_stage import solve_first_stage
    from .second_stage import classify_vs_benchmark, optimize_price

    sw = optimize_price(cfg, workers=opts["workers"])
    cls = classify_vs_benchmark(sw, cfg)
    footer = {"p_star": sw.p_star, "p_U": sw.p_U, "profit_star": sw.profit_star,
              "p_star_boundary": int(sw.p_star_boundary), "classification": cls.label,
              "surplus_at_p_U": cls.surplus, "cost_at_p_U": cls.cost}
    wr.table("sweep.csv", SWEEP_HEADER, _sweep_rows(sw.rows), footer)
    wr.table("plots/profit.csv", ["p", "profit"], [(r.p, r.profit) for r in sw.rows])
    wr.table("plots/profit_derivative.csv", ["p", "profit_derivative"], [(r.p, r.profit_derivative) for r in sw.rows])
    sol = solve_first_stage(cfg, sw.p_star)
    wr.menu(sol.menu, {"lambda_star": sol.lambda_star, "profit": sol.profit})
    _plot_first_stage(wr, sol)
    _first_stage_checks(wr, cfg, sol)
    if cls.consistent is not None and cls.hypotheses_met:
        wr.check("benchmark_classification", cls.consistent, cls.label)


def run_verify(cfg, wr, price, opts):
    from .first_stage import solve_first_stage
    from .verify_oracle import build_instance, dual_certificate, ic_brute_force, solve_primal_exact

    tol = cfg.tolerances.ic_tol
    if opts.get("menu"):
        menu, _ = read_menu_csv(opts["menu"])
        p = menu.p if price is None else price
        rep = ic_brute_force(menu, cfg, p)
        wr.check("ic1", rep.worst_ic1_violation <= tol,
                 f"worst={fmt(rep.worst_ic1_violation)} pair={rep.ic1_pair}")
        wr.check("ic2", rep.worst_ic2_violation <= tol, f"worst={fmt(rep.worst_ic2_violation)} at={rep.ic2_at}")
        wr.check("ir", rep.worst_ir_violation <= tol, f"worst={fmt(rep.worst_ir_violation)} theta={rep.ir_type}")
        return
    p, band = _price(cfg, price)
    sol = solve_first_stage(cfg, p)
    _first_stage_checks(wr, cfg, sol)
    grid = solve_first_stage(cfg, p, refine=False)
    inst = build_instance(cfg, p)
    primal = solve_primal_exact(inst)
    dual = dual_certificate(inst, primal.lambda_exact)
    gap = abs(primal.value - dual.value)
    wr.check("duality_gap", gap <= cfg.tolerances.lp_tol * (1 + abs(primal.value)), f"gap={fmt(gap)}")
    diff = abs(grid.lagrangian_value - primal.value)
    wr.check("lp_oracle_match", diff <= 1e-7, f"diff={fmt(diff)}")
    wr.menu(sol.menu, {"lambda_star": sol.lambda_star, "profit": sol.profit})


def run_planner(cfg, wr, price, opts):
    from .extensions import PlannerConfig, solve_planner, welfare_derivative

    pc = PlannerConfig.from_dict(cfg.variants.get("planner", {}) or {})
    _, band = _price(cfg, None)
    prices = [price] if price is not None else list(band.grid(cfg.grids.n_p))
    rows, best = [], None
    for p in prices:
        sol = solve_planner(cfg, p, pc)
        dW, regime = welfare_derivative(sol, cfg, pc)
        rows.append((p, sol.profit, dW, sol.lambda_star, sol.clearing_gap, sol.n_covered()))
        if best is None or sol.profit > best.profit:
            best = sol
    wr.table("sweep.csv", ["p", "welfare", "welfare_derivative", "lambda_star", "clearing_gap", "n_covered_types"],
             rows, {"p_W": best.p, "welfare_star": best.profit})
    wr.menu(best.menu, {"lambda_star": best.lambda_star, "welfare": best.profit}, tag="planner")
    _plot_first_stage(wr, best)
    _first_stage_checks(wr, cfg, best)


def run_bargain(cfg, wr, price, opts):
    from .extensions import BargainConfig, solve_bargain

    bc = BargainConfig.from_dict(cfg.variants.get("bargain", {}) or {})
    res = solve_bargain(cfg, bc, prices=[price] if price is not None else None, workers=opts["workers"])
    rows = [(pt.p, pt.S, pt.insurer_profit, pt.provider_profit, pt.nash if np.isfinite(pt.nash) else float("nan"),
             pt.multiplier, pt.demand, int(pt.binding)) for pt in res.points]
    worst = max([abs(pt.slackness) for pt in res.points] + [0.0])
    wr.check("capacity_slackness", worst <= cfg.tolerances.lp_tol, f"worst={fmt(worst)}")
    footer = {"agreement": int(res.agreement)}
    if res.agreement:
        footer.update(p=res.p, S=res.S, insurer_profit=res.insurer_profit, provider_profit=res.provider_profit)
    wr.table("sweep.csv", ["p", "S", "insurer_profit", "provider_profit", "nash", "capacity_multiplier",
                           "demand", "binding"], rows, footer)
    if res.agreement:
        wr.menu(res.solution.menu, {"S": res.S, "insurer_profit": res.insurer_profit}, tag="bargain")
        _plot_first_stage(wr, res.solution)
        _first_stage_checks(wr, cfg, res.solution)
    wr.check("agreement", res.agreement, "" if res.agreement else "no price gives both parties positive surplus")


def run_tiers(cfg, wr, price, opts):
    from .extensions import TierConfig, solve_tiers, tier_bands

    if "tiers" not in (cfg.variants or {}):
        raise ScenarioError("variants.tiers: required for the tiers pipeline")
    tc = TierConfig.from_dict(cfg.variants["tiers"])
    b1, b2 = tier_bands(cfg, tc)
    p1 = price if price is not None else (tc.p1 if tc.p1 is not None else 0.5 * (b1.p_N + b1.p_F))
    p2 = tc.p2 if tc.p2 is not None else (0.5 * (b2.p_N + b2.p_F) if b2 else None)
    ts = solve_tiers(cfg, tc, p1, p2, workers=opts["workers"])
    wr.menu(ts.basic.menu, {"profit": ts.basic.profit}, name="menu.csv", tag="basic")
    _plot_first_stage(wr, ts.basic, "basic_")
    _first_stage_checks(wr, cfg.with_changes(beta=0.0), ts.basic, "basic_")
    if ts.advanced is not None:
        wr.menu(ts.advanced.menu, {"profit": ts.advanced.profit}, name="menu_advanced.csv", tag="advanced")
        _plot_first_stage(wr, ts.advanced, "advanced_")
        _first_stage_checks(wr, cfg.with_changes(beta=0.0), ts.advanced, "advanced_")
    wr.table("tiers.csv", ["theta", "premium_basic", "premium_advanced", "premium_total"],
             [(th, a, b, a + b) for th, a, b in zip(
                 cfg.theta, ts.basic.menu.premiums,
                 ts.advanced.menu.premiums if ts.advanced is not None else np.zeros(cfg.n_atoms))],
             {"p1": p1, "p2": p2 if p2 is not None else float("nan"), "profit": ts.profit})


RUNNERS = {
    "validate": run_validate, "first-stage": run_first_stage, "sweep": run_sweep, "optimize": run_optimize,
    "verify": run_verify, "planner": run_planner, "bargain": run_bargain, "tiers": run_tiers,
}


def run(pipeline, scenario, price=None, out=None, overrides=(), menu=None, workers=1):
    """Execute one pipeline; returns the number of failed checks. Raises on invalid input."""
    if pipeline not in PIPELINES:
        raise ScenarioError(f"unknown pipeline {pipeline!r}; expected one of {', '.join(PIPELINES)}")
    doc, p_over = load_request(scenario, overrides)
    price = p_over if price is None else price
    wr = Writer(Path(out or os.environ.get(OUT_ENV, "out")))
    cfg = config_from_dict(doc, validate=(pipeline != "validate"))
    RUNNERS[pipeline](cfg, wr, price, {"menu": menu, "workers": workers})
    return wr.flush_report()


def _error_block(kind, message, pipeline):
    return json.dumps({"error": {"type": kind, "message": message, "pipeline": pipeline}}, sort_keys=True)


@click.command(context_settings={"help_option_names": ["-h", "--help"]})
@click.argument("pipeline", type=click.Choice(PIPELINES))
@click.option("--scenario", required=True, help="Scenario YAML file.")
@click.option("--price", type=float, default=None, help="Price p (defaults to the band midpoint).")
@click.option("--out", default=None, help=f"Output directory (default ${OUT_ENV} or ./out).")
@click.option("--override", "overrides", multiple=True, help="Dotted key=value, e.g. grids.n_q=101.")
@click.option("--menu", default=None, help="Menu CSV to check (verify pipeline).")
@click.option("--workers", type=int, default=1, show_default=True, help="Processes for price sweeps.")
def main(pipeline, scenario, price, out, overrides, menu, workers):
    """Run PIPELINE on a scenario file."""
    try:
        fails = run(pipeline, scenario, price, out, overrides, menu, workers)
    except (ScenarioError, ValueError, FileNotFoundError) as exc:
        click.echo(_error_block(type(exc).__name__, str(exc), pipeline), err=True)
        sys.exit(2)
    if fails:
        click.echo(_error_block("VerificationFailed", f"{fails} check(s) failed; see verify.txt", pipeline), err=True)
        sys.exit(1)
    sys.exit(0)


if __name__ == "__main__":  # pragma: no cover
    main()
