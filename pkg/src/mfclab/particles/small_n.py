"""Exact N-particle control for N <= 3 on a tensor grid."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.ndimage import map_coordinates

from ..errors import MemoryBudgetError
from ..measures import EmpiricalMeasure, GridDensity, SpaceTimeGrid, density_from_particles
from ..mfg import SolverConfig, value_function
from ..model import CylindricalCoupling, Hamiltonian, ProblemSpec
from ..pde import centered_gradient, hjb_march
from .ensemble import ParticleEnsemble, _rng, sample_initial

MAX_N = 3
TENSOR_BUDGET = 5e7  # entries of the (nt+1) x nx^N value array


class ParticleHamiltonian(Hamiltonian):
    """``(1/N) sum_j h(x_j, N p_j)`` on the product space of ``N`` 1D particles."""

    def __init__(self, base: Hamiltonian, n: int):
        if base.dim != 1:
            raise ValueError("particle Hamiltonian needs a 1D single-particle Hamiltonian")
        super().__init__(n)
        self.base, self.n = base, n

    def _cols(self, x, p):
        x = np.asarray(x, float)
        p = np.asarray(p, float)
        return [(x[..., j : j + 1], self.n * p[..., j : j + 1]) for j in range(self.n)]

    def h(self, x, p):
        return sum(self.base.h(xj, pj) for xj, pj in self._cols(x, p)) / self.n

    def h_p(self, x, p):
        return np.concatenate([self.base.h_p(xj, pj) for xj, pj in self._cols(x, p)], axis=-1)

    def h_x(self, x, p):
        return np.concatenate([self.base.h_x(xj, pj) for xj, pj in self._cols(x, p)], axis=-1) / self.n

    def h_pp(self, x, p):
        d = np.concatenate([self.base.h_pp(xj, pj)[..., 0] for xj, pj in self._cols(x, p)], axis=-1)
        out = np.zeros(d.shape + (self.n,))
        idx = np.arange(self.n)
        out[..., idx, idx] = self.n * d
        return out

    def p_star(self, x):
        x = np.asarray(x, float)
        return np.concatenate([self.base.p_star(x[..., j : j + 1]) for j in range(self.n)], axis=-1) / self.n


def product_points(grid: SpaceTimeGrid, n: int) -> np.ndarray:
    return np.stack(np.meshgrid(*([grid.x] * n), indexing="ij"), axis=-1)


def empirical_coupling(c: CylindricalCoupling, points: np.ndarray) -> np.ndarray:
    """``C(m^N_x)`` at every product-grid point ``x = (x_1, ..., x_N)``."""
    n = points.shape[-1]
    s = sum(np.asarray(c.features(points[..., j : j + 1]), float) for j in range(n)) / n
    if c.is_linear:
        return s[..., 0]
    flat = s.reshape(-1, s.shape[-1])
    return np.array([c.outer(v) for v in flat]).reshape(s.shape[:-1])


def symmetrizer(n: int):
    perms = list(itertools.permutations(range(n)))

    def sym(v: np.ndarray) -> np.ndarray:
        return sum(np.transpose(v, p) for p in perms) / len(perms)

    return sym


@dataclass(frozen=True, eq=False)
class SmallNValue:
    """``V^N`` on ``[t0, T] x [-R, R]^N`` with its residual and gradients."""

    N: int
    grid: SpaceTimeGrid
    values: np.ndarray
    residual: float
    cfl: float

    @cached_property
    def gradients(self) -> np.ndarray:
        """``D_{x_j} V^N`` with shape ``(nt+1, nx, ..., nx, N)``."""
        return centered_gradient(self.values, self.grid.dx, self.N)

    @property
    def lipschitz_bound(self) -> float:
        """``N sup_j |D_{x_j} V^N|``."""
        return float(self.N * np.max(np.abs(self.gradients)))

    def interpolate(self, field: np.ndarray, points: np.ndarray) -> np.ndarray:
        coords = (np.asarray(points, float).reshape(-1, self.N) + self.grid.box_halfwidth).T / self.grid.dx
        return map_coordinates(field, coords, order=1, mode="nearest")

    def value_at(self, n: int, points: np.ndarray) -> np.ndarray:
        return self.interpolate(self.values[n], points)


def solve_vn_small(spec: ProblemSpec, N: int, grid: SpaceTimeGrid | None = None, *, max_entries: float = TENSOR_BUDGET) -> SmallNValue:
    """Backward semi-implicit solve of the N-particle HJB on the product grid.

    ``-V_t - sum_j Lap_j V + (1/N) sum_j H(x_j, N D_j V) = F(m^N_x)`` with
    ``V(T) = G(m^N_x)``; each step is symmetrized over particle permutations.

    Raises
    ------
    MemoryBudgetError
        If ``(nt+1) * nx**N`` exceeds ``max_entries``.
    """
    grid = spec.grid if grid is None else grid
    if grid.dim != 1:
        raise ValueError("small-N solver needs a 1D single-particle grid")
    if not 1 <= N <= MAX_N:
        raise ValueError(f"N must lie in 1..{MAX_N}")
    size = float(grid.nt + 1) * float(grid.nx) ** N
    if size > max_entries:
        raise MemoryBudgetError(f"tensor grid needs {size:.3g} entries (budget {max_entries:.3g}); coarsen nx or nt")
    pts = product_points(grid, N)
    terminal = empirical_coupling(spec.terminal, pts)
    run = empirical_coupling(spec.running, pts)
    source = np.broadcast_to(run, (grid.nt + 1,) + run.shape)
    sym = symmetrizer(N)
    values, res, cfl = hjb_march(
        pts, grid.dx, grid.dt, grid.nt, ParticleHamiltonian(spec.hamiltonian, N), sym(terminal), source, symmetrize=sym
    )
    return SmallNValue(N, grid, values, res, cfl)


def sample_nodes(grid: SpaceTimeGrid, N: int, count: int, seed: int, inner: float = 0.5) -> list[tuple[int, tuple[int, ...]]]:
    """Seeded ``(time index, node multi-index)`` pairs with ``|x_j| <= inner * R``."""
    rng = np.random.default_rng(seed)
    ok = np.flatnonzero(np.abs(grid.x) <= inner * grid.box_halfwidth)
    return [(int(rng.integers(0, grid.nt + 1)), tuple(int(i) for i in rng.choice(ok, size=N))) for _ in range(count)]


def vn_vs_u_gap(
    spec: ProblemSpec,
    small: SmallNValue,
    sample_points=None,
    *,
    count: int = 50,
    seed: int = 0,
    inner: float = 0.5,
    bandwidth: float | None = None,
    config: SolverConfig | None = None,
) -> dict:
    """``|V^N(t, x) - U(t, m^N_x)|`` at grid-node sample points.

    Off the terminal time, ``U`` is evaluated at a kernel-smoothed grid version
    of the empirical measure (bandwidth a quarter cell by default); at ``T``
    both sides use ``G`` at the exact empirical measure. Random sample nodes
    satisfy ``|x_j| <= inner * R``.
    """
    g = small.grid
    if not g.same_mesh(spec.grid):
        raise ValueError("small-N grid and spec grid differ")
    pts = sample_points if sample_points is not None else sample_nodes(g, small.N, count, seed, inner)
    bw = 0.25 * g.dx if bandwidth is None else bandwidth
    cfg = config or SolverConfig(multistarts=1)
    rows = []
    for n, idx in pts:
        xs = g.x[list(idx)]
        v = float(small.values[(n,) + tuple(idx)])
        emp = EmpiricalMeasure(xs)
        if n == g.nt:
            u = spec.terminal.value(emp)
        else:
            u = value_function(spec, float(g.times[n]), density_from_particles(emp, g, bw), cfg)
        rows.append({"t": float(g.times[n]), "x": tuple(float(a) for a in xs), "V": v, "U": u, "gap": abs(v - u)})
    gaps = np.array([r["gap"] for r in rows])
    return {"rows": rows, "max_gap": float(gaps.max()), "mean_gap": float(gaps.mean()), "N": small.N}


def _yn_march(spec: ProblemSpec, small: SmallNValue, x0: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, float]:
    """March ``(B, N)`` particle blocks; returns trajectories and the max drift used."""
    g = small.grid
    R = g.box_halfwidth
    N = small.N
    grads = small.gradients
    out = np.empty((g.nt + 1,) + x0.shape)
    out[0] = x0
    amp = np.sqrt(2.0 * g.dt)
    vmax = 0.0
    for n in range(g.nt):
        x = out[n] + amp * noise[n]
        x = np.where(x > R, 2 * R - x, np.where(x < -R, -2 * R - x, x))
        p = np.stack([N * small.interpolate(grads[n + 1][..., k], x) for k in range(N)], axis=-1)
        drift = -spec.hamiltonian.h_p(x[..., None], p.reshape(x.shape)[..., None])[..., 0]
        vmax = max(vmax, float(np.max(np.abs(drift))))
        x = x + g.dt * drift
        if np.any(np.abs(x) > R):
            raise ValueError("optimal feedback pushed a particle outside the box")
        out[n + 1] = x
    return out, vmax


def simulate_optimal_yn(spec: ProblemSpec, small: SmallNValue, m0: GridDensity, seed: int, stream: int = 0) -> ParticleEnsemble:
    """Optimal N-particle trajectories with feedback ``-H_p(Y_k, N D_{x_k} V^N)``.

    Initial positions and increments are drawn exactly as for the mean-field
    feedback system with the same ``(seed, stream)``, so the two can be
    compared path by path.
    """
    rng = _rng(seed, stream)
    x0 = sample_initial(m0, small.N, rng)
    noise = rng.standard_normal((small.grid.nt, small.N))
    traj, vmax = _yn_march(spec, small, x0[None, :], noise[:, None, :])
    return ParticleEnsemble(small.N, 1, traj[:, 0, :], seed, small.grid.dt, small.grid.t0, 0, None, f"optimal-yn(max_drift={vmax:.6g})")


def drift_bound(spec: ProblemSpec, small: SmallNValue, samples: int = 201) -> float:
    """``sup |H_p(x, p)|`` over grid ``x`` and ``|p|`` up to the Lipschitz bound of ``V^N``."""
    P = small.lipschitz_bound
    x = small.grid.x[:, None, None]
    p = np.linspace(-P, P, samples)[None, :, None]
    return float(np.max(np.abs(spec.hamiltonian.h_p(np.broadcast_to(x, (x.shape[0], samples, 1)), np.broadcast_to(p, (x.shape[0], samples, 1))))))
