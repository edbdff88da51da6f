"""Compiled vs pure-Python stencil kernels.

Times one operator application and one preconditioned CG solve on the
merged-unknown system of a ball with a few inclusions, for each grid
spacing, and checks that both backends return the same answer.

    python benchmarks/bench_kernels.py [--h 0.05 0.025] [--repeat 5]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from dilute_homog import kernels
from dilute_homog.domain import sample_configuration, unit_ball
from dilute_homog.grid import Grid
from dilute_homog.solver import assemble, conductivity_field, solve_with_inclusions


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--h", type=float, nargs="+", default=[0.05, 0.025])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    backends = ["python"]
    try:
        kernels.get("compiled")
        backends.insert(0, "compiled")
    except ImportError:
        print("compiled extension not built; timing the fallback only")

    dom = unit_ball()
    cfg = sample_configuration(dom, 0.2, 8, seed=1)
    print(f"{'h':>8} {'unknowns':>10} {'backend':>9} {'apply [ms]':>11} {'solve [s]':>10} {'iters':>6}")
    for h in args.h:
        grid = Grid(dom, h)
        asm = assemble(grid, conductivity_field(grid).values, cfg.centers, cfg.epsilon)
        x = np.random.default_rng(0).standard_normal(asm.n + 1)
        x[-1] = 0.0
        energies = {}
        for b in backends:
            t_apply = best_of(lambda: asm.matvec(x, b), args.repeat)
            t0 = time.perf_counter()
            out = solve_with_inclusions(dom, cfg, h, backend=b)
            t_solve = time.perf_counter() - t0
            energies[b] = out.dirichlet_energy
            print(f"{h:8.4f} {asm.n:10d} {b:>9} {1e3 * t_apply:11.3f} {t_solve:10.3f} {out.iterations:6d}")
        if len(energies) == 2:
            rel = abs(energies["compiled"] - energies["python"]) / energies["python"]
            print(f"{'':8} relative energy difference between backends: {rel:.2e}")


if __name__ == "__main__":
    main()
