"""Particle ensembles driven by the feedback of a solved MFC problem."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .. import kernels
from .._kernels_py import _reflect
from ..measures import DensityPath, EmpiricalMeasure, GridDensity, SpaceTimeGrid, quantile_pieces
from ..mfg import MfgSolution
from ..model import ProblemSpec


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Trajectories of ``N`` particles on the time nodes of a grid.

    ``trajectories`` has shape ``(nt+1, N)`` in 1D and ``(nt+1, N, dim)``
    otherwise. ``exits`` counts reflections at the box boundary; ``tau`` is
    the first time the tracked distance left the neighborhood (None if never).
    """

    N: int
    dim: int
    trajectories: np.ndarray
    noise_seed: int
    dt: float
    t0: float
    exits: int = 0
    tau: float | None = None
    label: str = ""

    def __post_init__(self):
        if self.trajectories.shape[1] != self.N:
            raise ValueError("trajectory count does not match N")
        self.trajectories.setflags(write=False)

    @property
    def truncated(self) -> bool:
        return self.tau is not None

    @property
    def valid(self) -> bool:
        return self.exits == 0

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.trajectories.shape[0])

    def positions(self, n: int) -> np.ndarray:
        p = self.trajectories[n]
        return p[:, None] if p.ndim == 1 else p

    def empirical(self, n: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.positions(n))

    def stopped(self) -> np.ndarray:
        """Trajectories frozen after ``tau`` (the stopped process)."""
        if self.tau is None:
            return self.trajectories
        k = int(round((self.tau - self.t0) / self.dt))
        out = np.array(self.trajectories)
        out[k + 1 :] = out[k]
        return out


# ---------------------------------------------------------------------------
# sampling


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


def sample_initial(m0: GridDensity, n: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. draws from ``m0``: inverse CDF in 1D, rejection in higher dimension.

    The 1D sampler inverts the same piecewise-linear quantile function used by
    the Wasserstein distances (cell-wise constant density).
    """
    grid = m0.grid
    if grid.dim == 1:
        s, q0, q1 = quantile_pieces(m0)
        u = rng.random(n)
        i = np.clip(np.searchsorted(s, u, side="right") - 1, 0, len(q0) - 1)
        frac = (u - s[i]) / np.maximum(s[i + 1] - s[i], 1e-300)
        return q0[i] + (q1[i] - q0[i]) * frac
    R = grid.box_halfwidth
    vmax = float(m0.values.max())
    out = np.empty((0, grid.dim))
    while out.shape[0] < n:
        prop = rng.uniform(-R, R, size=(2 * n, grid.dim))
        dens = interpolate_field(grid, m0.values, prop)
        acc = rng.random(2 * n) * vmax < dens
        out = np.concatenate([out, prop[acc]])
    return out[:n]


def interpolate_field(grid: SpaceTimeGrid, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of nodal ``values`` at ``points`` ``(P, dim)``."""
    coords = (np.asarray(points, float) + grid.box_halfwidth).T / grid.dx
    return map_coordinates(values, coords, order=1, mode="nearest")


def march_numpy(grid: SpaceTimeGrid, x0: np.ndarray, noise: np.ndarray, alpha: np.ndarray) -> tuple[np.ndarray, int]:
    """Split-step Euler-Maruyama for any dimension.

    Each step adds the Brownian increment, reflects, then moves by the drift
    ``alpha^{n+1}`` interpolated at the diffused position and reflects again.
    ``x0`` is ``(P, dim)``, ``noise`` ``(nt, P, dim)``, ``alpha`` ``(nt+1, *space, dim)``.
    """
    R = grid.box_halfwidth
    out = np.empty((noise.shape[0] + 1,) + x0.shape)
    out[0] = x0
    amp = np.sqrt(2.0 * grid.dt)
    exits = 0
    for n in range(noise.shape[0]):
        x, e1 = _reflect(out[n] + amp * noise[n], R)
        drift = np.stack([interpolate_field(grid, alpha[n + 1][..., k], x) for k in range(grid.dim)], axis=-1)
        x, e2 = _reflect(x + grid.dt * drift, R)
        out[n + 1] = x
        exits += e1 + e2
    return out, exits


def drive(grid: SpaceTimeGrid, m0: GridDensity, alpha: np.ndarray, n_particles: int, seed: int, stream: int = 0):
    """Sample initial positions and Brownian increments from ``seed`` and march."""
    rng = _rng(seed, stream)
    x0 = sample_initial(m0, n_particles, rng)
    if grid.dim == 1:
        noise = rng.standard_normal((grid.nt, n_particles))
        traj, exits = kernels.get_backend().particle_march(
            x0, noise, np.ascontiguousarray(alpha[..., 0]), -grid.box_halfwidth, grid.dx, grid.dt, grid.box_halfwidth
        )
        return traj, exits
    noise = rng.standard_normal((grid.nt, n_particles, grid.dim))
    return march_numpy(grid, x0, noise, alpha)


def simulate_mckean_vlasov(spec: ProblemSpec, sol: MfgSolution, N: int, seed: int, stream: int = 0) -> ParticleEnsemble:
    """i.i.d. particles following the optimal feedback ``alpha = -H_p(x, Du)`` of ``sol``."""
    if not sol.converged:
        raise ValueError("simulation needs a converged solution")
    g = sol.grid
    traj, exits = drive(g, sol.m[0], np.asarray(sol.alpha.values), N, seed, stream)
    return ParticleEnsemble(N, g.dim, traj, seed, g.dt, g.t0, exits, None, "mckean-vlasov")


# ---------------------------------------------------------------------------
# distances between particle clouds and grid densities (1D)


class QuantileTrack:
    """Cached grid quantile functions of a density path for repeated 1D distances."""

    def __init__(self, path: DensityPath):
        if path.grid.dim != 1:
            raise ValueError("exact particle distances are 1D only")
        self.pieces = [quantile_pieces(path[n]) for n in range(len(path))]
        self._w = kernels.get_backend().quantile_wasserstein

    def distance(self, n: int, positions: np.ndarray, p: int = 1) -> float:
        pts = np.sort(np.asarray(positions, float).reshape(-1))
        s = np.arange(pts.size + 1, dtype=float) / pts.size
        sa, a0, a1 = self.pieces[n]
        wp = self._w(sa, a0, a1, s, pts, pts, p)
        return max(wp, 0.0) ** (1.0 / p)

    def path(self, traj: np.ndarray, p: int = 1) -> np.ndarray:
        return np.array([self.distance(n, traj[n], p) for n in range(traj.shape[0])])


def first_exit(d2_path: np.ndarray, times: np.ndarray, delta: float) -> float | None:
    idx = np.flatnonzero(d2_path > delta)
    return float(times[idx[0]]) if idx.size else None


def simulate_meanfield_feedback(
    spec: ProblemSpec,
    sol: MfgSolution,
    N: int,
    seed: int,
    delta_track: float,
    track: QuantileTrack | None = None,
    stream: int = 0,
) -> ParticleEnsemble:
    """Mean-field feedback system with the derivative frozen to the base ``Du``.

    While ``d2(m^N_t, m(t)) < delta_track`` the feedback at the empirical
    measure is approximated by the base feedback. The first time this fails is
    recorded as ``tau``; the run is kept and flagged as truncated. The full
    unstopped path is stored; ``ParticleEnsemble.stopped`` gives the stopped one.
    """
    if sol.grid.dim != 1:
        raise ValueError("distance tracking is implemented for 1D grids")
    ens = simulate_mckean_vlasov(spec, sol, N, seed, stream)
    track = track or QuantileTrack(sol.m)
    d2 = track.path(ens.trajectories, 2)
    tau = first_exit(d2, ens.times, delta_track)
    return ParticleEnsemble(N, ens.dim, ens.trajectories, seed, ens.dt, ens.t0, ens.exits, tau, "meanfield-feedback")
