"""Compiled vs pure-Python kernel timings.

Usage: ``python benchmarks/bench_kernels.py [--repeat 5]``. Prints one line per
kernel with the best-of-``repeat`` time of each backend, their ratio and the
max absolute difference of the outputs.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from mfclab import kernels
from mfclab.measures import gaussian_density, quantile_pieces
from mfclab.model import default_grid


def cases(grid, rng):
    nx, nt, dx, dt = grid.nx, grid.nt, grid.dx, grid.dt
    r = dt / dx**2
    lower, upper = np.full(nx - 1, -r), np.full(nx - 1, -r)
    upper[0] = lower[-1] = -2.0 * r
    diag = np.full(nx, 1.0 + 2.0 * r)
    alpha = 0.5 * np.sin(grid.x)[None, :] * np.ones((nt + 1, 1))
    rho0 = gaussian_density(grid, 0.0, 0.5).values[:, None] * np.ones((1, 8))
    w = grid.weights
    m_a = gaussian_density(grid, 0.0, 0.5)
    m_b = gaussian_density(grid, 1.0, 1.5)
    qa, qb = quantile_pieces(m_a), quantile_pieces(m_b)
    x0 = rng.normal(0.0, 0.7, 512)
    noise = rng.standard_normal((nt, 512))

    def run(b):
        fac = b.tridiag_factor(lower, diag, upper)
        return {
            "tridiag_solve(161x64)": (lambda: b.tridiag_solve(fac, np.ones((nx, 64)))),
            "forward_march(k=8)": (lambda: b.forward_march(rho0, alpha, w, dx, dt, fac)),
            "backward_march(k=8)": (lambda: b.backward_march(rho0, alpha, dx, dt, fac)),
            "quantile_wasserstein(p=2)": (lambda: b.quantile_wasserstein(*qa, *qb, 2)),
            "particle_march(N=512)": (lambda: b.particle_march(x0, noise, alpha, -grid.box_halfwidth, dx, dt, grid.box_halfwidth)[0]),
        }

    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if "compiled" not in kernels.available():
        print("compiled backend not built; only the Python backend is available")
        return 1
    grid = default_grid(1)
    run = cases(grid, np.random.default_rng(0))
    py, cy = run(kernels.get_backend("python")), run(kernels.get_backend("compiled"))
    print(f"{'kernel':30s} {'python[s]':>11s} {'compiled[s]':>12s} {'speedup':>8s} {'max|diff|':>10s}")
    for name in py:
        tp = min(timeit.repeat(py[name], number=1, repeat=args.repeat))
        tc = min(timeit.repeat(cy[name], number=1, repeat=args.repeat))
        diff = float(np.max(np.abs(np.asarray(py[name]()) - np.asarray(cy[name]()))))
        print(f"{name:30s} {tp:11.2e} {tc:12.2e} {tp / tc:8.1f} {diff:10.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
