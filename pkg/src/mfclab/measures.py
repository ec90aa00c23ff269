"""Probability measures on a truncated box: grid densities and empirical measures.

Grid densities live on the nodes of a uniform grid over ``[-R, R]^dim`` with
trapezoid weights. In 1D a density is read as piecewise constant on each cell
``[x_i, x_{i+1}]`` with value ``(m_i + m_{i+1}) / 2``; this has exactly the
trapezoid mass and a piecewise-linear CDF, so 1D Wasserstein distances are
computed in closed form from piecewise-linear quantile functions. In 2D,
distances are exact discrete optimal-transport values between weighted point
clouds (grid nodes or particles).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from . import kernels
from .errors import SolverError

MASS_TOL = 1e-9
NEG_TOL = 1e-12
MAX_SUPPORT_2D = 512


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform node grid on ``[-R, R]^dim`` times a uniform mesh of ``[t0, T]``.

    ``strict=False`` is reserved for internal sub-grids (for instance the tail
    of a horizon used when re-solving from an interior time), which may have
    fewer than 8 time steps.
    """

    dim: int = 1
    box_halfwidth: float = 8.0
    nx: int = 161
    t0: float = 0.0
    T: float = 1.0
    nt: int = 100
    strict: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if self.nx < 8:
            raise ValueError("nx must be at least 8")
        if self.nt < (8 if self.strict else 1):
            raise ValueError("nt must be at least 8")
        if not self.box_halfwidth > 0:
            raise ValueError("box_halfwidth must be positive")
        if not (0 <= self.t0 < self.T):
            raise ValueError("need 0 <= t0 < T")

    @property
    def dx(self) -> float:
        return 2.0 * self.box_halfwidth / (self.nx - 1)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.nt

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nx,) * self.dim

    @cached_property
    def x(self) -> np.ndarray:
        """1D node coordinates (shared by every axis)."""
        return -self.box_halfwidth + self.dx * np.arange(self.nx)

    @cached_property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nt + 1)

    @cached_property
    def weights1d(self) -> np.ndarray:
        w = np.full(self.nx, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights with shape ``grid.shape``."""
        w = self.weights1d
        return w if self.dim == 1 else np.multiply.outer(w, w)

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates with shape ``(*grid.shape, dim)``."""
        axes = np.meshgrid(*([self.x] * self.dim), indexing="ij")
        return np.stack(axes, axis=-1)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Trapezoid integral over the spatial axes (leading axes are kept)."""
        w = self.weights
        axes = tuple(range(values.ndim - self.dim, values.ndim))
        return np.sum(values * w, axis=axes)

    def time_index(self, t: float) -> int:
        k = (t - self.t0) / self.dt
        n = int(round(k))
        if abs(k - n) > 1e-8 or not 0 <= n <= self.nt:
            raise ValueError(f"time {t} is not a node of the time mesh")
        return n

    def tail(self, n: int) -> "SpaceTimeGrid":
        """Sub-grid on ``[t_n, T]`` with the same spacings."""
        if not 0 <= n < self.nt:
            raise ValueError("tail index out of range")
        if n == 0:
            return self
        return SpaceTimeGrid(
            self.dim, self.box_halfwidth, self.nx, float(self.times[n]), self.T, self.nt - n, strict=False
        )

    def same_space(self, other: "SpaceTimeGrid") -> bool:
        return (self.dim, self.nx, self.box_halfwidth) == (other.dim, other.nx, other.box_halfwidth)

    def same_mesh(self, other: "SpaceTimeGrid") -> bool:
        return (
            self.same_space(other)
            and self.nt == other.nt
            and abs(self.t0 - other.t0) < 1e-12
            and abs(self.T - other.T) < 1e-12
        )


def _check_density_values(grid: SpaceTimeGrid, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape[-grid.dim:] != grid.shape:
        raise ValueError(f"density shape {values.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(values)):
        raise SolverError("density has non-finite values")
    vmin = values.min()
    if vmin < -NEG_TOL:
        raise SolverError(f"negative density {vmin:.3e} beyond tolerance")
    return np.maximum(values, 0.0)


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Nonnegative nodal density with unit trapezoid mass."""

    grid: SpaceTimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = _check_density_values(self.grid, self.values)
        mass = float(self.grid.integrate(v))
        if abs(mass - 1.0) > MASS_TOL:
            raise SolverError(f"density mass {mass!r} differs from 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_values(cls, grid: SpaceTimeGrid, values: np.ndarray) -> "GridDensity":
        """Normalize arbitrary nonnegative nodal values to unit mass."""
        v = _check_density_values(grid, values)
        mass = float(grid.integrate(v))
        if not mass > 0:
            raise ValueError("cannot normalize a density with zero mass")
        return cls(grid, v / mass)

    @property
    def dim(self) -> int:
        return self.grid.dim

    def mass(self) -> float:
        return float(self.grid.integrate(self.values))


@dataclass(frozen=True, eq=False)
class DensityPath:
    """Time-indexed sequence of grid densities, ``values[n]`` at ``grid.times[n]``."""

    grid: SpaceTimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = _check_density_values(self.grid, self.values)
        if v.shape != (self.grid.nt + 1,) + self.grid.shape:
            raise ValueError("density path shape does not match the time mesh")
        masses = self.grid.integrate(v)
        bad = np.abs(masses - 1.0) > MASS_TOL
        if np.any(bad):
            n = int(np.argmax(bad))
            raise SolverError(f"slice {n} has mass {masses[n]!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, n: int) -> GridDensity:
        return GridDensity(self.grid, self.values[n])

    @property
    def final(self) -> GridDensity:
        return self[len(self) - 1]


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted atoms; uniform weights give the empirical measure of N points."""

    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("empirical measure needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("empirical measure has non-finite points")
        n = pts.shape[0]
        if self.weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
            if w.shape != (n,) or np.any(w < 0) or not w.sum() > 0:
                raise ValueError("weights must be nonnegative with positive sum")
            w = w / w.sum()
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n(self) -> int:
        return self.points.shape[0]


Measure = Union[GridDensity, EmpiricalMeasure]


# ---------------------------------------------------------------------------
# constructors and simple statistics


def gaussian_density(grid: SpaceTimeGrid, mean=0.0, variance: float = 1.0) -> GridDensity:
    """Isotropic Gaussian restricted to the box and renormalized."""
    mu = np.broadcast_to(np.asarray(mean, dtype=float), (grid.dim,))
    r2 = np.sum((grid.points - mu) ** 2, axis=-1)
    return GridDensity.from_values(grid, np.exp(-0.5 * r2 / variance))


def mean(m: Measure) -> np.ndarray:
    if isinstance(m, GridDensity):
        return _grid_mean(m)
    return m.weights @ m.points


def _grid_mean(m: GridDensity) -> np.ndarray:
    pts = m.grid.points
    return np.array([m.grid.integrate(pts[..., k] * m.values) for k in range(m.dim)])


def covariance_trace(m: Measure) -> float:
    """Total variance ``E|X - EX|^2``."""
    mu = mean(m)
    if isinstance(m, GridDensity):
        r2 = np.sum((m.grid.points - mu) ** 2, axis=-1)
        return float(m.grid.integrate(r2 * m.values))
    return float(m.weights @ np.sum((m.points - mu) ** 2, axis=1))


def moment(m: Measure, p: int) -> float:
    """``int |x|^p dm`` (trapezoid rule on grids, weighted average on atoms)."""
    if int(p) != p or not 1 <= p <= 8:
        raise ValueError("p must be an integer in 1..8")
    if isinstance(m, GridDensity):
        r = np.linalg.norm(m.grid.points, axis=-1)
        return float(m.grid.integrate(r**p * m.values))
    return float(m.weights @ np.linalg.norm(m.points, axis=1) ** p)


def boundary_mass(m: GridDensity, cells: int = 2) -> float:
    """Mass carried by the outer ``cells`` layers of nodes."""
    mask = np.zeros(m.grid.shape, dtype=bool)
    for ax in range(m.dim):
        idx = [slice(None)] * m.dim
        idx[ax] = slice(0, cells)
        mask[tuple(idx)] = True
        idx[ax] = slice(m.grid.nx - cells, m.grid.nx)
        mask[tuple(idx)] = True
    return float(np.sum((m.grid.weights * m.values)[mask]))


def density_from_particles(e: EmpiricalMeasure, grid: SpaceTimeGrid, bandwidth: float) -> GridDensity:
    """Gaussian-kernel density estimate on the grid nodes.

    Each atom spreads its weight over the nodes with a kernel normalized on the
    grid itself, so arbitrarily small bandwidths stay well defined (the mass
    collapses onto the nearest node).
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    if e.dim != grid.dim:
        raise ValueError("dimension mismatch")
    nodes = grid.points.reshape(-1, grid.dim)
    w = grid.weights.reshape(-1)
    out = np.zeros(nodes.shape[0])
    chunk = max(1, 4_000_000 // nodes.shape[0])
    for start in range(0, e.n, chunk):
        pts = e.points[start : start + chunk]
        d2 = np.sum((pts[:, None, :] - nodes[None, :, :]) ** 2, axis=-1)
        logk = -0.5 * d2 / bandwidth**2
        logk -= logk.max(axis=1, keepdims=True)
        k = np.exp(logk)
        k /= (k @ w)[:, None]
        out += e.weights[start : start + chunk] @ k
    return GridDensity.from_values(grid, out.reshape(grid.shape))


# ---------------------------------------------------------------------------
# Wasserstein distances


def quantile_pieces(m: Measure) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Piecewise-linear quantile function of a 1D measure.

    Returns breakpoints ``s`` (length K+1, from 0 to 1) and the values of the
    quantile function at the left and right ends of each of the K pieces.
    """
    if m.dim != 1:
        raise ValueError("quantile representation is 1D only")
    if isinstance(m, GridDensity):
        v = m.values
        x = m.grid.x
        cell = 0.5 * m.grid.dx * (v[:-1] + v[1:])
        keep = cell > 0
        c = cell[keep]
        q0, q1 = x[:-1][keep], x[1:][keep]
    else:
        order = np.argsort(m.points[:, 0], kind="stable")
        pts = m.points[order, 0]
        c = m.weights[order]
        keep = c > 0
        c, pts = c[keep], pts[keep]
        q0 = q1 = pts
    s = np.concatenate(([0.0], np.cumsum(c)))
    s /= s[-1]
    s[-1] = 1.0
    return s, q0, q1


def _atoms(m: Measure) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(m, GridDensity):
        mass = (m.grid.weights * m.values).reshape(-1)
        pts = m.grid.points.reshape(-1, m.dim)
        keep = mass > 1e-14 * mass.max()
        return pts[keep], mass[keep] / mass[keep].sum()
    keep = m.weights > 0
    return m.points[keep], m.weights[keep]


def _subsample(pts, w, max_support, rng):
    if len(w) <= max_support:
        return pts, w
    idx = rng.choice(len(w), size=max_support, replace=True, p=w)
    return pts[idx], np.full(max_support, 1.0 / max_support)


def transport_cost(xa, wa, xb, wb, p: int) -> float:
    """Exact discrete optimal-transport cost ``min sum pi_ij |x_i - y_j|^p``.

    Equal-size uniform clouds are solved as an assignment problem; general
    weights go through the transportation LP, whose solution is polished by
    re-solving the equality constraints on the optimal support.
    """
    diff = xa[:, None, :] - xb[None, :, :]
    cost = np.sqrt(np.sum(diff * diff, axis=-1)) ** p
    na, nb = len(wa), len(wb)
    if na == nb and np.allclose(wa, 1.0 / na, rtol=0, atol=1e-15) and np.allclose(
        wb, 1.0 / nb, rtol=0, atol=1e-15
    ):
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].sum() / na)
    rows = np.repeat(np.arange(na), nb)
    cols = np.tile(np.arange(nb), na)
    var = np.arange(na * nb)
    a_eq = sparse.vstack(
        [
            sparse.csr_matrix((np.ones(na * nb), (rows, var)), shape=(na, na * nb)),
            sparse.csr_matrix((np.ones(na * nb), (cols, var)), shape=(nb, na * nb)),
        ]
    ).tocsr()
    b_eq = np.concatenate([wa, wb])
    res = linprog(cost.reshape(-1), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise SolverError(f"transport LP failed: {res.message}")
    plan = res.x
    support = np.flatnonzero(plan > 1e-12)
    sub = a_eq[:, support].toarray()
    polished, *_ = np.linalg.lstsq(sub, b_eq, rcond=None)
    if np.all(polished > -1e-13) and np.abs(sub @ polished - b_eq).max() < 1e-13:
        return float(cost.reshape(-1)[support] @ polished)
    return float(res.fun)


def _wasserstein(a: Measure, b: Measure, p: int, max_support: int, seed: int) -> float:
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    if a.dim == 1:
        sa, a0, a1 = quantile_pieces(a)
        sb, b0, b1 = quantile_pieces(b)
        wp = kernels.get_backend().quantile_wasserstein(sa, a0, a1, sb, b0, b1, p)
        return max(wp, 0.0) ** (1.0 / p)
    rng = np.random.default_rng(seed)
    xa, wa = _subsample(*_atoms(a), max_support, rng)
    xb, wb = _subsample(*_atoms(b), max_support, rng)
    return max(transport_cost(xa, wa, xb, wb, p), 0.0) ** (1.0 / p)


def wasserstein1(a: Measure, b: Measure, *, max_support: int = MAX_SUPPORT_2D, seed: int = 0) -> float:
    """Wasserstein-1 distance; exact in 1D, exact discrete OT in 2D.

    In 2D, supports larger than ``max_support`` are replaced by i.i.d.
    subsamples drawn with ``seed``.
    """
    return _wasserstein(a, b, 1, max_support, seed)


def wasserstein2(a: Measure, b: Measure, *, max_support: int = MAX_SUPPORT_2D, seed: int = 0) -> float:
    """Wasserstein-2 distance; see :func:`wasserstein1`."""
    return _wasserstein(a, b, 2, max_support, seed)


def sup_distance(path_a: DensityPath, path_b: DensityPath, p: int = 1) -> float:
    """``sup_t d_p(a(t), b(t))`` over the common time mesh."""
    if len(path_a) != len(path_b):
        raise ValueError("paths have different lengths")
    fn = wasserstein1 if p == 1 else wasserstein2
    return max(fn(path_a[n], path_b[n]) for n in range(len(path_a)))
