"""Grid solvers: backward HJB, forward Fokker-Planck and linear dual equations.

Discretization (uniform nodes, trapezoid weights ``w``):

* diffusion is implicit; in 2D and on tensor grids it is split axis by axis
  (each factor is a Neumann tridiagonal solve, and the factors commute);
* the Hamiltonian is explicit through the Engquist-Osher numerical
  Hamiltonian evaluated on one-sided differences, with the outward difference
  set to zero at the box faces;
* transport in the density equation is the exact weighted adjoint of the
  upwind operator used in the dual equation, so that
  ``<psi^n, m^n>`` is constant along paired solves (exact discrete duality)
  and mass is conserved to round-off.

HJB step::

    u^n = (I - dt Lap)^{-1} [u^{n+1} - dt H_EO(x, D^- u^{n+1}, D^+ u^{n+1})] + dt F(x, m^n)

Density step with velocity ``alpha``::

    m^{n+1} = (I - dt B_{n+1})^* (I - dt Lap)^{-1} m^n,
    (I - dt B) psi = psi + dt (alpha^+ D^+ psi - alpha^- D^- psi)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels
from .errors import SolverError
from .measures import MASS_TOL, NEG_TOL, DensityPath, GridDensity, SpaceTimeGrid
from .model import Hamiltonian, ProblemSpec

log = logging.getLogger(__name__)

DRIFT_LIMIT = 50.0
MASS_LEAK_TOL = 1e-6


# ---------------------------------------------------------------------------
# discrete operators


_FACTOR_CACHE: dict = {}


def diffusion_factor(nx: int, dx: float, dt: float, backend=None):
    """Factored ``I - dt Lap_h`` for the 1D Neumann Laplacian."""
    backend = kernels.get_backend() if backend is None else backend
    key = (nx, float(dx), float(dt), backend.name)
    fac = _FACTOR_CACHE.get(key)
    if fac is None:
        r = dt / dx**2
        diag = np.full(nx, 1.0 + 2.0 * r)
        lower = np.full(nx - 1, -r)
        upper = np.full(nx - 1, -r)
        upper[0] = -2.0 * r
        lower[-1] = -2.0 * r
        fac = backend.tridiag_factor(lower, diag, upper)
        if len(_FACTOR_CACHE) > 256:
            _FACTOR_CACHE.clear()
        _FACTOR_CACHE[key] = fac
    return fac


def one_sided_gradients(u: np.ndarray, dx: float, ndim: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward and forward differences, shape ``(*u.shape, ndim)``.

    The difference pointing out of the box is zero at the boundary faces.
    """
    dminus = np.zeros(u.shape + (ndim,))
    dplus = np.zeros(u.shape + (ndim,))
    lead = u.ndim - ndim
    for k in range(ndim):
        ax = lead + k
        diff = np.diff(u, axis=ax) / dx
        n = u.shape[ax]
        hi = [slice(None)] * u.ndim
        lo = [slice(None)] * u.ndim
        hi[ax] = slice(1, n)
        lo[ax] = slice(0, n - 1)
        dminus[tuple(hi) + (k,)] = diff
        dplus[tuple(lo) + (k,)] = diff
    return dminus, dplus


def centered_gradient(u: np.ndarray, dx: float, ndim: int) -> np.ndarray:
    """Central differences, zero normal component on the boundary faces."""
    dminus, dplus = one_sided_gradients(u, dx, ndim)
    g = 0.5 * (dminus + dplus)
    lead = u.ndim - ndim
    for k in range(ndim):
        ax = lead + k
        n = u.shape[ax]
        for edge in (0, n - 1):
            idx = [slice(None)] * u.ndim
            idx[ax] = edge
            g[tuple(idx) + (k,)] = 0.0
    return g


def laplacian(u: np.ndarray, dx: float, ndim: int) -> np.ndarray:
    """Neumann (mirror ghost) Laplacian over the last ``ndim`` axes."""
    out = np.zeros_like(u)
    lead = u.ndim - ndim
    for k in range(ndim):
        ax = lead + k
        padded = np.concatenate(
            [np.take(u, [1], axis=ax), u, np.take(u, [u.shape[ax] - 2], axis=ax)], axis=ax
        )
        n = u.shape[ax]
        out += (
            np.take(padded, range(2, n + 2), axis=ax) - 2.0 * u + np.take(padded, range(0, n), axis=ax)
        ) / dx**2
    return out


def divergence(q: np.ndarray, weights: np.ndarray, dx: float, ndim: int) -> np.ndarray:
    """``div_h = -D_c^*``: negative weighted adjoint of :func:`centered_gradient`.

    ``q`` has shape ``(*space, ndim, k)`` or ``(*space, ndim)``. Summation by
    parts ``<psi, div_h q>_w = -<D_c psi, q>_w`` holds exactly.
    """
    batch = q.ndim == ndim + 2
    if not batch:
        q = q[..., None]
    w = weights[..., None]
    out = np.zeros(q.shape[:ndim] + q.shape[-1:])
    for k in range(ndim):
        wq = w * q[..., k, :]
        n = wq.shape[k]
        interior = np.zeros_like(wq)
        idx = [slice(None)] * wq.ndim
        idx[k] = slice(1, n - 1)
        interior[tuple(idx)] = wq[tuple(idx)]
        # (D_c^* q)_j = (wq_{j-1} - wq_{j+1}) / (2 dx w_j) over interior sources
        shifted_up = np.zeros_like(wq)
        shifted_dn = np.zeros_like(wq)
        a = [slice(None)] * wq.ndim
        b = [slice(None)] * wq.ndim
        a[k] = slice(1, n)
        b[k] = slice(0, n - 1)
        shifted_up[tuple(a)] = interior[tuple(b)]  # wq_{j-1}
        shifted_dn[tuple(b)] = interior[tuple(a)]  # wq_{j+1}
        out -= (shifted_up - shifted_dn) / (2.0 * dx)
    out /= w
    return out if batch else out[..., 0]


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class ValueField:
    """Backward-solve output ``u(t_n, x)`` with centered gradients.

    ``grad_bound`` is the sup norm of the centered gradient, ``residual`` the
    max defect of the discrete scheme and ``cfl`` the largest explicit
    monotonicity number encountered.
    """

    grid: SpaceTimeGrid
    values: np.ndarray
    residual: float = 0.0
    cfl: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise SolverError("value field has non-finite entries")
        self.values.setflags(write=False)

    @cached_property
    def gradients(self) -> np.ndarray:
        g = centered_gradient(self.values, self.grid.dx, self.grid.dim)
        g.setflags(write=False)
        return g

    @cached_property
    def grad_bound(self) -> float:
        return float(np.max(np.abs(self.gradients)))


@dataclass(frozen=True, eq=False)
class DriftField:
    """Velocity field ``alpha(t_n, x)`` with shape ``(nt+1, *grid.shape, dim)``."""

    grid: SpaceTimeGrid
    values: np.ndarray
    limit: float = DRIFT_LIMIT

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.nt + 1,) + self.grid.shape + (self.grid.dim,):
            raise ValueError(f"drift shape {v.shape} does not match the grid")
        if not np.all(np.isfinite(v)):
            raise SolverError("drift has non-finite entries")
        vmax = float(np.max(np.abs(v))) if v.size else 0.0
        if vmax > self.limit:
            raise SolverError(f"drift magnitude {vmax:.3g} exceeds limit {self.limit}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: SpaceTimeGrid, c) -> "DriftField":
        c = np.broadcast_to(np.asarray(c, float), (grid.dim,))
        return cls(grid, np.broadcast_to(c, (grid.nt + 1,) + grid.shape + (grid.dim,)).copy())

    @classmethod
    def zero(cls, grid: SpaceTimeGrid) -> "DriftField":
        return cls.constant(grid, 0.0)

    def tail(self, n: int) -> "DriftField":
        return DriftField(self.grid.tail(n), self.values[n:], self.limit)

    def cfl(self) -> float:
        return float(self.grid.dt / self.grid.dx * np.max(np.sum(np.abs(self.values), axis=-1)))


def feedback_drift(hamiltonian: Hamiltonian, u: ValueField, limit: float = DRIFT_LIMIT) -> DriftField:
    """``alpha = -H_p(x, Du)`` with the centered gradient of ``u``."""
    return DriftField(u.grid, -hamiltonian.h_p(u.grid.points, u.gradients), limit)


# ---------------------------------------------------------------------------
# HJB


def hjb_march(
    points: np.ndarray,
    dx: float,
    dt: float,
    nt: int,
    hamiltonian: Hamiltonian,
    terminal: np.ndarray,
    source=None,
    *,
    symmetrize=None,
) -> tuple[np.ndarray, float, float]:
    """Backward semi-implicit march on an arbitrary tensor grid.

    ``points`` has shape ``(*space, ndim)``; ``source`` is None or an array
    ``(nt+1, *space)`` of running-cost flat derivatives ``F(x, m^n)``.
    Returns ``(values, residual, cfl)``.
    """
    ndim = points.shape[-1]
    space = points.shape[:-1]
    backend = kernels.get_backend()
    factor = diffusion_factor(space[0], dx, dt, backend)
    ps = hamiltonian.p_star(points)
    out = np.empty((nt + 1,) + space)
    out[nt] = terminal
    residual = 0.0
    cfl = 0.0
    for n in range(nt - 1, -1, -1):
        nxt = out[n + 1]
        pm, pp = one_sided_gradients(nxt, dx, ndim)
        h_eo = hamiltonian.numerical(points, pm, pp, ps)
        # monotonicity number of the explicit part
        up = np.maximum(hamiltonian.h_p(points, np.maximum(pm, ps)), 0.0)
        dn = np.maximum(-hamiltonian.h_p(points, np.minimum(pp, ps)), 0.0)
        cfl = max(cfl, float(np.max(np.sum(up + dn, axis=-1))) * dt / dx)
        rhs = nxt - dt * h_eo
        cur = backend.diffuse(rhs[..., None], factor, ndim)[..., 0]
        if source is not None:
            cur = cur + dt * source[n]
        if symmetrize is not None:
            cur = symmetrize(cur)
        bound = max(float(np.max(np.abs(nxt))), 1.0)
        if not np.all(np.isfinite(cur)) or float(np.max(np.abs(cur))) > 10.0 * bound:
            raise SolverError(f"HJB blow-up at step {n}: sup norm grew more than 10x")
        out[n] = cur
        base = cur - (dt * source[n] if source is not None else 0.0)
        defect = base - dt * laplacian(base, dx, ndim) - rhs
        residual = max(residual, float(np.max(np.abs(defect))) / dt)
    if cfl > 1.0:
        log.warning("explicit Hamiltonian CFL number %.3f exceeds 1; monotonicity not guaranteed", cfl)
    return out, residual, cfl


def solve_hjb_backward(spec: ProblemSpec, m_path: DensityPath, grid: SpaceTimeGrid | None = None) -> ValueField:
    """Solve ``-u_t - Lap u + H(x, Du) = F(x, m(t))`` with ``u(T) = G(x, m(T))``.

    ``grid`` defaults to the path's grid, which must share the spatial mesh of
    ``spec.grid`` (it may be a tail of the horizon).
    """
    grid = m_path.grid if grid is None else grid
    if not grid.same_mesh(m_path.grid) or not grid.same_space(spec.grid):
        raise ValueError("density path and spec live on different grids")
    s_run = spec.running.integrals(m_path)
    source = np.stack([spec.running.grid_derivative(grid, s) for s in s_run])
    terminal = spec.terminal.grid_derivative(grid, spec.terminal.integrals(m_path.final))
    values, res, cfl = hjb_march(grid.points, grid.dx, grid.dt, grid.nt, spec.hamiltonian, terminal, source)
    return ValueField(grid, values, res, cfl)


# ---------------------------------------------------------------------------
# Fokker-Planck and linear equations


def forward_linear(
    grid: SpaceTimeGrid, rho0: np.ndarray, alpha: np.ndarray, source: np.ndarray | None = None
) -> np.ndarray:
    """Signed forward march of a batch ``rho0`` with shape ``(*space, k)``."""
    backend = kernels.get_backend()
    fac = diffusion_factor(grid.nx, grid.dx, grid.dt, backend)
    return backend.forward_march_nd(
        np.ascontiguousarray(rho0, float), np.asarray(alpha, float), grid.weights, grid.dx, grid.dt, fac, source
    )


def backward_linear(
    grid: SpaceTimeGrid, terminal: np.ndarray, alpha: np.ndarray, source: np.ndarray | None = None
) -> np.ndarray:
    """Backward march of ``-psi_t - Lap psi - alpha.D psi = s`` for a batch of terminals."""
    backend = kernels.get_backend()
    fac = diffusion_factor(grid.nx, grid.dx, grid.dt, backend)
    return backend.backward_march_nd(
        np.ascontiguousarray(terminal, float), np.asarray(alpha, float), grid.dx, grid.dt, fac, source
    )


@dataclass(frozen=True)
class FokkerPlanckInfo:
    max_step_mass_drift: float
    min_value: float
    cfl: float


def solve_fp_forward(
    grid: SpaceTimeGrid, m0: GridDensity, drift: DriftField, *, return_info: bool = False
):
    """Solve ``m_t - Lap m + div(alpha m) = 0`` with no-flux boundaries.

    Raises
    ------
    SolverError
        On advective CFL above one, negative values below ``-1e-12`` or a mass
        change larger than ``1e-6``.
    """
    if not grid.same_space(m0.grid):
        raise ValueError("initial density lives on a different grid")
    if drift.values.shape[0] != grid.nt + 1:
        raise ValueError("drift and grid have different time meshes")
    cfl = drift.cfl()
    if cfl > 1.0:
        raise SolverError(f"advective CFL number {cfl:.3f} exceeds 1; reduce dt")
    path = forward_linear(grid, m0.values[..., None], drift.values)[..., 0]
    masses = grid.integrate(path)
    step_drift = float(np.max(np.abs(np.diff(masses)))) if grid.nt else 0.0
    if np.max(np.abs(masses - 1.0)) > MASS_LEAK_TOL:
        raise SolverError(f"mass leak: mass reached {masses[np.argmax(np.abs(masses - 1))]!r}")
    vmin = float(path.min())
    if vmin < -NEG_TOL:
        raise SolverError(f"negative density {vmin:.3e}")
    path = np.maximum(path, 0.0)
    path /= grid.integrate(path).reshape((-1,) + (1,) * grid.dim)
    out = DensityPath(grid, path)
    if return_info:
        return out, FokkerPlanckInfo(step_drift, vmin, cfl)
    return out


def solve_linear_dual(
    grid: SpaceTimeGrid, drift: DriftField, terminal: np.ndarray, t1: float, t2: float
) -> np.ndarray:
    """Solve ``-psi_t - Lap psi - alpha.D psi = 0`` on ``[t1, t2]`` with ``psi(t2) = terminal``.

    ``drift`` is the velocity ``alpha`` of the paired density equation (the
    vector field of the dual equation is ``V = -alpha``), so that
    ``<psi(t), m(t)>`` is conserved when ``m`` solves the density equation with
    velocity ``alpha``. Returns the path on time nodes ``t1..t2``.
    """
    n1, n2 = grid.time_index(t1), grid.time_index(t2)
    if not n1 < n2:
        raise ValueError("need t1 < t2")
    terminal = np.asarray(terminal, float)
    if terminal.shape != grid.shape:
        raise ValueError("terminal field does not match the grid")
    sub = drift.values[n1 : n2 + 1]
    path = backward_linear(grid, terminal[..., None], sub)[..., 0]
    growth = np.max(np.abs(path)) / max(np.max(np.abs(terminal)), 1.0)
    if not np.all(np.isfinite(path)) or growth > 10.0 ** (n2 - n1):
        raise SolverError("dual solve blew up")
    return path


def pairing(grid: SpaceTimeGrid, psi: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Weighted inner products ``<psi^n, m^n>`` along matching paths."""
    return grid.integrate(psi * m)


def holder_quotients(u: ValueField, delta: float = 0.5, max_shift: int = 4) -> dict:
    """Discrete Hoelder quotients of ``D^2 u`` in space and ``u_t`` in time.

    Diagnostics only: the quotient ``|f(a) - f(b)| / |a - b|^e`` is maximized
    over node pairs at most ``max_shift`` cells apart, with ``e = delta`` in
    space and ``e = delta / 2`` in time. Boundary layers are excluded.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    g = u.grid
    lap = np.stack([laplacian(v, g.dx, g.dim) for v in u.values])
    inner = (slice(None),) + (slice(2, -2),) * g.dim
    lap = lap[inner]
    ut = np.diff(u.values, axis=0)[inner] / g.dt
    space = 0.0
    for ax in range(1, lap.ndim):
        for k in range(1, max_shift + 1):
            n = lap.shape[ax]
            d = np.abs(np.take(lap, range(k, n), axis=ax) - np.take(lap, range(n - k), axis=ax))
            space = max(space, float(d.max(initial=0.0)) / (k * g.dx) ** delta)
    time = 0.0
    for k in range(1, min(max_shift, ut.shape[0] - 1) + 1):
        d = np.abs(ut[k:] - ut[:-k])
        time = max(time, float(d.max(initial=0.0)) / (k * g.dt) ** (delta / 2.0))
    return {"delta": delta, "space_d2u": space, "time_ut": time}
