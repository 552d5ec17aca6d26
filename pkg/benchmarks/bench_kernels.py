#!/usr/bin/env python3
"""Compare the compiled and numpy kernel backends.

Times the Q1 cell-matrix kernel and the CSR mat-vec on square grids and
checks that both backends agree before timing.

    python3 benchmarks/bench_kernels.py --sizes 50 100 200 --repeat 5
"""

import argparse
import timeit

import numpy as np

from anisoap.fem import Discretization, FormKind
from anisoap.kernels import available_backends
from anisoap.verify import manufactured_case
from anisoap import build_grid


def cell_args(disc):
    g = disc.grid
    gp, gw = np.polynomial.legendre.leggauss(3)
    gp, gw = (gp + 1) / 2, gw / 2
    ncx, ncz = g.x_nodes.size - 1, g.z_nodes.size - 1
    coef = np.random.default_rng(0).uniform(1, 2, (ncx, ncz, gp.size, gp.size))
    return (coef, g.hx.copy(), g.hz.copy(), gp, gw, True, False, True, False)


def csr_args(disc):
    m = disc.matrix(FormKind.A1)
    x = np.random.default_rng(1).standard_normal(m.shape[1])
    return (m.indptr.astype(np.int32), m.indices.astype(np.int32), m.data, x)


def bench(fn, args, repeat):
    t = timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)
    return min(t)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[50, 100, 200])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; timing the numpy fallback only")
    names = sorted(backends)
    print(f"{'kernel':<12}{'N':>6}" + "".join(f"{n + ' [ms]':>16}" for n in names) + f"{'speedup':>10}")
    for n in args.sizes:
        p = manufactured_case()
        disc = Discretization(p, build_grid(p.x_lo, p.x_hi, p.z_lo, p.z_hi, n, n))
        for label, make, kernel in (("cell_q1", cell_args, "q1_cell_matrices"), ("csr_matvec", csr_args, "csr_matvec")):
            a = make(disc)
            outs = {b: getattr(backends[b], kernel)(*a) for b in names}
            ref = outs["python"]
            for b in names:
                if not np.allclose(outs[b], ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max()):
                    raise SystemExit(f"backend {b} disagrees on {label} at N={n}")
            times = {b: bench(getattr(backends[b], kernel), a, args.repeat) for b in names}
            speed = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{label:<12}{n:>6}" + "".join(f"{1e3 * times[b]:>16.3f}" for b in names) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
