"""Time the compiled hull kernel against the pure-Python fallback, plus full solves.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import sys
import timeit
from pathlib import Path

import numpy as np

from insuremkt import _hull_py, kernels, load_scenario, solve_first_stage
from insuremkt.market import price_band
from insuremkt.second_stage import optimize_price

ROOT = Path(__file__).resolve().parents[1]


def bench_hulls(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for n_atoms, n_q in ((10, 201), (50, 201), (50, 1001)):
        x = np.linspace(0, 1, n_q)
        Y = np.cumsum(rng.normal(size=(n_atoms, n_q)), axis=1)
        fast = min(timeit.repeat(lambda: kernels.upper_hulls(x, Y), number=5, repeat=repeat)) / 5
        slow = min(timeit.repeat(lambda: _hull_py.upper_hulls(x, Y), number=5, repeat=repeat)) / 5
        rows.append((n_atoms, n_q, fast, slow))
    print(f"hull kernel (backend={kernels.BACKEND})")
    print(f"{'atoms':>6} {'n_q':>6} {'kernel ms':>10} {'python ms':>10} {'speedup':>8}")
    for n_atoms, n_q, fast, slow in rows:
        print(f"{n_atoms:>6} {n_q:>6} {fast * 1e3:>10.3f} {slow * 1e3:>10.3f} {slow / fast:>8.1f}")


def bench_solves(repeat):
    print("\nfull solves")
    for name in ("two_type", "calibrated_uniform", "tabulated"):
        cfg = load_scenario(ROOT / "scenarios" / f"{name}.yaml")
        band = price_band(cfg)
        p = 0.5 * (band.p_N + band.p_F)
        t = min(timeit.repeat(lambda: solve_first_stage(cfg, p), number=1, repeat=repeat))
        print(f"  first stage {name:<10} atoms={cfg.n_atoms:<3} n_q={cfg.grids.n_q:<5} {t * 1e3:8.1f} ms")
    cfg = load_scenario(ROOT / "scenarios" / "calibrated_uniform.yaml")
    t = min(timeit.repeat(lambda: optimize_price(cfg), number=1, repeat=1))
    print(f"  optimize calibrated_uniform (n_p={cfg.grids.n_p}) {t:8.2f} s")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    bench_hulls(args.repeat)
    bench_solves(args.repeat)


if __name__ == "__main__":
    sys.exit(main())
