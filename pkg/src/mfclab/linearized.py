"""Linearized forward-backward system, stability classification and second-order checks.

Around a solution ``(u, m, alpha)`` with ``Gamma = H_pp(x, Du)`` the linear system is::

    -z_t - Lap z - alpha.Dz = dF(m(t))(rho(t)) + R1,      z(T) = dG(m(T))(rho(T)) + R3
     rho_t - Lap rho + div(alpha rho) = sigma div(m Gamma Dz + R2),   rho(t0) = sigma xi

discretized with the operators of :mod:`mfclab.pde`::

    z^n       = (I - dt Lap)^{-1} (I - dt B_{n+1}) z^{n+1} + dt (dF(rho^n) + R1^n)
    zh^{n+1}  = (I - dt B_{n+1}) z^{n+1}
    rho^{n+1} = (I - dt B_{n+1})^* [ (I - dt Lap)^{-1} rho^n
                                     + dt sigma div_h(m^{n+1} Gamma^{n+1} D_c zh^{n+1} + R2^{n+1}) ]

For homogeneous data this gives the exact discrete identity::

    sum_n dt [ sigma <Gamma D_c zh^{n+1} . D_c zh^{n+1}, m^{n+1}> + <dF(rho^n), rho^n> ]
        + <dG(rho^nt), rho^nt> = 0

Norms on rho-paths are the weighted l2 norm ``sum_n dt sum_i w_i rho_i^n ** 2``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import _kernels_py
from .errors import ConvergenceError, MemoryBudgetError, SolverError
from .mfg import MfgSolution, SolverConfig, solve_mfc
from .model import ProblemSpec
from .pde import backward_linear, centered_gradient, divergence, forward_linear

log = logging.getLogger(__name__)

DEFAULT_SIGMA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_THRESHOLD = 1e-6
DENSE_BUDGET = 4e8
MASS_ZERO_TOL = 1e-9
BETA_ZERO_STEPS = 3  # time indices 0, 1, 2 carry no perturbation


@dataclass(frozen=True)
class LinearSources:
    """Data of the inhomogeneous system; ``None`` entries are zero.

    Shapes: ``R1`` ``(nt+1, *space)``, ``R2`` ``(nt+1, *space, dim)``,
    ``R3`` and ``xi`` ``(*space)``.
    """

    R1: np.ndarray | None = None
    R2: np.ndarray | None = None
    R3: np.ndarray | None = None
    xi: np.ndarray | None = None

    def scaled(self, c: float) -> "LinearSources":
        f = lambda a: None if a is None else c * np.asarray(a, float)
        return LinearSources(f(self.R1), f(self.R2), f(self.R3), f(self.xi))


@dataclass(frozen=True, eq=False)
class LinearizedSolution:
    z: np.ndarray
    mu: np.ndarray
    sigma: float
    residual: float
    iterations: int


class Linearization:
    """Coefficients of the linear system frozen along a base solution."""

    def __init__(self, spec: ProblemSpec, base: MfgSolution):
        if not base.converged:
            raise ValueError("linearization needs a converged base solution")
        g = base.grid
        self.spec, self.grid = spec, g
        self.alpha = np.asarray(base.alpha.values)
        self.m = np.asarray(base.m.values)
        self.gamma = spec.hamiltonian.h_pp(g.points, base.u.gradients)
        self.s_run = spec.running.integrals(base.m)
        self.s_term = spec.terminal.integrals(base.m.final)
        self.phi_run = spec.running.features_on(g)
        self.phi_term = spec.terminal.features_on(g)
        self.scale = np.sqrt(g.dt * g.weights)

    # -- building blocks on batches with trailing axis k ---------------------

    def second_running(self, rho: np.ndarray) -> np.ndarray:
        """``dF(m^n)(rho^n)`` for every n; ``rho`` has shape ``(nt+1, *space, k)``."""
        return np.stack([self.spec.running.grid_second_apply(self.grid, self.s_run[n], rho[n]) for n in range(len(rho))])

    def second_terminal(self, rho_T: np.ndarray) -> np.ndarray:
        return self.spec.terminal.grid_second_apply(self.grid, self.s_term, rho_T)

    def z_path(self, rho: np.ndarray, R1=None, R3=None) -> np.ndarray:
        src = self.second_running(rho)
        src[-1] = 0.0
        if R1 is not None:
            src[:-1] += np.asarray(R1, float)[:-1, ..., None]
        term = self.second_terminal(rho[-1])
        if R3 is not None:
            term = term + np.asarray(R3, float)[..., None]
        return backward_linear(self.grid, term, self.alpha, src)

    def z_hat(self, z: np.ndarray) -> np.ndarray:
        g = self.grid
        out = np.zeros_like(z)
        for n in range(1, g.nt + 1):
            out[n] = _kernels_py.transport_apply(z[n], self.alpha[n], g.dx, g.dt)
        return out

    def grad(self, z: np.ndarray) -> np.ndarray:
        """Centered gradient of a batch path, shape ``(nt+1, *space, dim, k)``."""
        moved = np.moveaxis(z, -1, 1)
        gr = centered_gradient(moved, self.grid.dx, self.grid.dim)
        return np.moveaxis(gr, 1, -1)

    def flux(self, zh: np.ndarray) -> np.ndarray:
        """``m Gamma D_c zh`` with shape ``(nt+1, *space, dim, k)``."""
        gz = self.grad(zh)
        return self.m[..., None, None] * np.einsum("...ij,...jk->...ik", self.gamma, gz)

    def rho_path(self, z: np.ndarray, sigma: float, R2=None, xi=None) -> np.ndarray:
        g = self.grid
        k = z.shape[-1]
        q = self.flux(self.z_hat(z))
        if R2 is not None:
            q = q + np.asarray(R2, float)[..., None]
        src = np.zeros((g.nt + 1,) + g.shape + (k,))
        if sigma != 0.0:
            for n in range(1, g.nt + 1):
                src[n] = sigma * divergence(q[n], g.weights, g.dx, g.dim)
        rho0 = np.zeros(g.shape + (k,))
        if xi is not None:
            rho0 = rho0 + sigma * np.asarray(xi, float)[..., None]
        return forward_linear(g, rho0, self.alpha, src)

    def picard_map(self, rho: np.ndarray, sigma: float, src: LinearSources | None = None):
        src = src or LinearSources()
        z = self.z_path(rho, src.R1, src.R3)
        return z, self.rho_path(z, sigma, src.R2, src.xi)

    def norm(self, rho: np.ndarray) -> np.ndarray:
        """Weighted l2 norm of each path in a batch."""
        s = self.scale[..., None]
        return np.sqrt(np.sum((s * rho) ** 2, axis=tuple(range(rho.ndim - 1))))

    def quadratic_identity(self, z: np.ndarray, rho: np.ndarray, sigma: float) -> np.ndarray:
        """Left-hand side of the discrete quadratic identity for a batch ``(z, rho)``."""
        g = self.grid
        zh = self.z_hat(z)
        gz = self.grad(zh)
        gam = np.einsum("...ij,...jk->...ik", self.gamma, gz)
        kin = g.integrate(np.moveaxis(self.m[..., None] * np.sum(gam * gz, axis=-2), -1, 1))  # (nt+1, k)
        run = g.integrate(np.moveaxis(self.second_running(rho) * rho, -1, 1))
        term = g.integrate(np.moveaxis(self.second_terminal(rho[-1]) * rho[-1], -1, 0))
        return g.dt * (sigma * kin[1:].sum(axis=0) + run[:-1].sum(axis=0)) + term


# ---------------------------------------------------------------------------
# linear solve


def solve_linearized(
    spec: ProblemSpec,
    base: MfgSolution,
    sigma: float,
    sources: LinearSources | None = None,
    *,
    damping: float = 1.0,
    tol: float = 1e-13,
    max_iter: int = 2000,
    lin: Linearization | None = None,
) -> LinearizedSolution:
    """Damped Picard iteration on ``rho`` for the inhomogeneous linear system.

    The damping starts at ``damping`` and halves whenever the update reverses
    direction while the defect grows.

    Raises
    ------
    ConvergenceError
        If the iteration diverges or does not reach ``tol`` (relative to the
        size of the iterate) within ``max_iter`` steps.
    """
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [0, 1]")
    lin = lin or Linearization(spec, base)
    g = lin.grid
    rho = np.zeros((g.nt + 1,) + g.shape + (1,))
    theta = damping
    prev_r, prev_d, first = np.inf, None, None
    src = sources or LinearSources()
    for it in range(1, max_iter + 1):
        z, new = lin.picard_map(rho, sigma, src)
        d = new - rho
        r = float(lin.norm(d)[0])
        size = float(lin.norm(new)[0])
        if not np.isfinite(r):
            raise ConvergenceError("linearized Picard iteration produced non-finite values")
        first = r if first is None else first
        if r <= tol * max(size, 1e-300) or size == 0.0 and r == 0.0:
            return LinearizedSolution(z[..., 0], new[..., 0], sigma, r, it)
        if r > 1e8 * max(first, 1e-300):
            raise ConvergenceError(f"linearized Picard iteration diverged (defect {r:.3e})")
        if prev_d is not None and r > prev_r and np.sum(d * prev_d * lin.scale[..., None] ** 2) < 0:
            theta = max(0.5 * theta, 1e-3)
        rho = rho + theta * d
        prev_r, prev_d = r, d
    raise ConvergenceError(f"linearized Picard iteration did not converge in {max_iter} steps (defect {prev_r:.3e})")


# ---------------------------------------------------------------------------
# stability


@dataclass(frozen=True)
class StabilityReport:
    """Smallest singular values of ``I - K_sigma`` in the weighted l2 norm.

    ``relative`` divides by the operator norm; ``det_signs`` is the sign of
    ``det(I - K_sigma)``, which starts at +1 for ``sigma = 0`` so a negative
    value signals a singular crossing between grid points.
    """

    sigma_grid: list
    min_singular_values: list
    relative: list
    det_signs: list
    verdict: str
    threshold: float
    method: str
    norm: str = "weighted-l2(dt*w)"
    notes: list = field(default_factory=list)

    def csv_rows(self) -> list[dict]:
        return [
            {"sigma": s, "min_singular_value": v, "relative": r, "det_sign": d, "verdict": self.verdict}
            for s, v, r, d in zip(self.sigma_grid, self.min_singular_values, self.relative, self.det_signs)
        ]


def _moment_batch(lin: Linearization, coeffs: np.ndarray, sigma: float) -> np.ndarray:
    """Apply ``P``: moment coefficients -> new rho-path, batched over columns.

    ``coeffs`` has shape ``(nt+1, k_max, r)``: running moments at slots
    ``1..nt-1`` and terminal moments at slot ``nt``.
    """
    g = lin.grid
    kf, kg = lin.phi_run.shape[-1], lin.phi_term.shape[-1]
    r = coeffs.shape[-1]
    src = np.zeros((g.nt + 1,) + g.shape + (r,))
    for n in range(1, g.nt):
        hess = lin.spec.running.outer_hess(lin.s_run[n])
        src[n] = lin.phi_run @ (hess @ coeffs[n, :kf])
    term = lin.phi_term @ (lin.spec.terminal.outer_hess(lin.s_term) @ coeffs[g.nt, :kg])
    z = backward_linear(g, term, lin.alpha, src)
    return lin.rho_path(z, sigma)


def _moment_rows(lin: Linearization) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Index list and scaled row vectors of the moment map ``Q D^{-1}``."""
    g = lin.grid
    idx, rows = [], []
    sq = np.sqrt(g.weights / g.dt)
    for n in range(1, g.nt + 1):
        phi = lin.phi_term if n == g.nt else lin.phi_run
        for j in range(phi.shape[-1]):
            row = np.zeros((g.nt + 1,) + g.shape)
            row[n] = sq * phi[..., j]
            idx.append((n, j))
            rows.append(row[1:].ravel())
    return idx, np.array(rows)


def _structured_svd(lin: Linearization, sigma: float):
    """Exact extreme singular values of ``I - K`` through its low-rank part.

    ``K = P Q`` with ``Q`` the finite list of feature moments, so ``I - K`` is
    the identity on the orthogonal complement of ``range(P) + range(Q^T)`` and
    maps that subspace into itself.
    """
    g = lin.grid
    idx, qrows = _moment_rows(lin)
    r = len(idx)
    kmax = max(lin.phi_run.shape[-1], lin.phi_term.shape[-1])
    coeffs = np.zeros((g.nt + 1, kmax, r))
    for c, (n, j) in enumerate(idx):
        coeffs[n, j, c] = 1.0
    pcols = _moment_batch(lin, coeffs, sigma)  # (nt+1, *space, r)
    ptil = (lin.scale[..., None] * pcols)[1:].reshape(-1, r)
    small = np.eye(r) - qrows @ ptil  # I - Q P on moment space
    sign, _ = np.linalg.slogdet(small)
    basis = np.concatenate([ptil, qrows.T], axis=1)
    uu, sv, _ = np.linalg.svd(basis, full_matrices=False)
    keep = sv > 1e-12 * max(sv[0], 1e-300) if sv.size else sv.astype(bool)
    U = uu[:, keep]
    M = np.eye(U.shape[1]) - (U.T @ ptil) @ (qrows @ U)
    s = np.linalg.svd(M, compute_uv=False) if U.shape[1] else np.ones(1)
    full_dim = ptil.shape[0]
    smin, smax = float(s.min()), float(s.max())
    if U.shape[1] < full_dim:
        smin, smax = min(smin, 1.0), max(smax, 1.0)
    return smin, smax, float(sign)


def assemble_operator(lin: Linearization, sigma: float, max_entries: float = DENSE_BUDGET, chunk: int = 256) -> np.ndarray:
    """Dense matrix of ``I - K_sigma`` in scaled coordinates ``y = sqrt(dt w) rho``.

    Raises
    ------
    MemoryBudgetError
        If the matrix would exceed ``max_entries`` entries.
    """
    g = lin.grid
    space = int(np.prod(g.shape))
    n = g.nt * space
    if float(n) * n > max_entries:
        raise MemoryBudgetError(
            f"dense operator would have {float(n) * n:.3g} entries (budget {max_entries:.3g}); "
            "coarsen nx or nt, or use the structured method"
        )
    scale = lin.scale
    mat = np.empty((n, n))
    for start in range(0, n, chunk):
        cols = np.arange(start, min(start + chunk, n))
        y = np.zeros((g.nt, space, cols.size))
        y.reshape(n, cols.size)[cols, np.arange(cols.size)] = 1.0
        rho = np.zeros((g.nt + 1,) + g.shape + (cols.size,))
        rho[1:] = y.reshape((g.nt,) + g.shape + (cols.size,)) / scale[..., None]
        _, new = lin.picard_map(rho, sigma)
        ky = (scale[..., None] * new)[1:].reshape(n, cols.size)
        mat[:, cols] = -ky
        mat[cols, cols] += 1.0
    return mat


def _dense_svd(lin: Linearization, sigma: float, max_entries: float):
    mat = assemble_operator(lin, sigma, max_entries)
    s = np.linalg.svd(mat, compute_uv=False)
    sign, _ = np.linalg.slogdet(mat)
    return float(s.min()), float(s.max()), float(sign)


def classify_stability(
    spec: ProblemSpec,
    base: MfgSolution,
    sigma_grid=DEFAULT_SIGMA_GRID,
    *,
    threshold: float = DEFAULT_THRESHOLD,
    method: str = "structured",
    max_dense_entries: float = DENSE_BUDGET,
    threads: int = 1,
) -> StabilityReport:
    """Stability verdict from the smallest singular value of ``I - K_sigma``.

    Each sigma is ``ok`` if the relative smallest singular value exceeds
    ``10 * threshold``, ``singular`` if it is at most ``threshold`` and
    ambiguous in between. Verdicts: ``unstable`` if sigma = 1 is singular,
    ``inconclusive`` if it is ambiguous or the base is not the unique global
    cluster, ``strongly_stable`` if every sigma is ok with no determinant sign
    change, else ``stable``.
    """
    sig = [float(s) for s in sigma_grid]
    if 1.0 not in sig:
        raise ValueError("sigma grid must contain 1")
    if any(not 0.0 <= s <= 1.0 for s in sig):
        raise ValueError("sigma values must lie in [0, 1]")
    lin = Linearization(spec, base)
    if method == "structured":
        job = lambda s: _structured_svd(lin, s)
    elif method == "dense":
        job = lambda s: _dense_svd(lin, s, max_dense_entries)
    else:
        raise ValueError(f"unknown method {method!r}")
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(job, sig))
    else:
        out = [job(s) for s in sig]
    smin = [o[0] for o in out]
    rel = [o[0] / o[1] for o in out]
    signs = [o[2] for o in out]

    def status(v):
        return "ok" if v > 10 * threshold else ("singular" if v <= threshold else "ambiguous")

    stat = [status(v) for v in rel]
    notes = []
    at_one = stat[sig.index(1.0)]
    if base.unique_global is False:
        verdict = "inconclusive"
        notes.append("base is one of several global clusters")
    elif at_one == "singular":
        verdict = "unstable"
    elif at_one == "ambiguous":
        verdict = "inconclusive"
        notes.append("sigma=1 singular value inside the threshold band")
    elif all(s == "ok" for s in stat) and all(d > 0 for d in signs):
        verdict = "strongly_stable"
    else:
        verdict = "stable"
        if any(d <= 0 for d in signs):
            notes.append("determinant sign change across the sigma grid")
    return StabilityReport(sig, smin, rel, signs, verdict, threshold, method, notes=notes)


def strong_stability_from_stability_check(spec: ProblemSpec, base: MfgSolution, report: StabilityReport | None = None) -> dict:
    """Check that a stable, unique base is above threshold for every sigma in the grid."""
    report = report or classify_stability(spec, base)
    k = report.sigma_grid.index(1.0)
    stable_at_one = report.relative[k] > 10 * report.threshold
    if not stable_at_one or base.unique_global is not True:
        return {"status": "not-applicable", "violations": [], "report": report}
    bad = [s for s, v in zip(report.sigma_grid, report.relative) if v <= 10 * report.threshold]
    if bad:
        log.warning("sigma values %s fall below threshold on a stable unique base: discretization artifact", bad)
    return {"status": "violations" if bad else "consistent", "violations": bad, "report": report}


def _moment_determinant(lin: Linearization, sigma: float) -> float:
    g = lin.grid
    idx, qrows = _moment_rows(lin)
    kmax = max(lin.phi_run.shape[-1], lin.phi_term.shape[-1])
    coeffs = np.zeros((g.nt + 1, kmax, len(idx)))
    for c, (n, j) in enumerate(idx):
        coeffs[n, j, c] = 1.0
    ptil = (lin.scale[..., None] * _moment_batch(lin, coeffs, sigma))[1:].reshape(-1, len(idx))
    return float(np.linalg.det(np.eye(len(idx)) - qrows @ ptil))


def singular_sigma(spec: ProblemSpec, base: MfgSolution, lo: float, hi: float, xtol: float = 1e-13) -> float:
    """Root in ``[lo, hi]`` of ``sigma -> det(I - K_sigma)``; the endpoints must bracket a sign change."""
    lin = Linearization(spec, base)
    return float(brentq(lambda s: _moment_determinant(lin, s), lo, hi, xtol=xtol))


def kernel_vector(spec: ProblemSpec, base: MfgSolution, sigma: float):
    """Near-kernel vector of ``I - K_sigma``: returns ``(z, rho, smallest singular value)``."""
    lin = Linearization(spec, base)
    g = lin.grid
    idx, qrows = _moment_rows(lin)
    r = len(idx)
    kmax = max(lin.phi_run.shape[-1], lin.phi_term.shape[-1])
    coeffs = np.zeros((g.nt + 1, kmax, r))
    for c, (n, j) in enumerate(idx):
        coeffs[n, j, c] = 1.0
    pcols = _moment_batch(lin, coeffs, sigma)
    ptil = (lin.scale[..., None] * pcols)[1:].reshape(-1, r)
    U, sv, _ = np.linalg.svd(np.concatenate([ptil, qrows.T], axis=1), full_matrices=False)
    U = U[:, sv > 1e-12 * sv[0]]
    M = np.eye(U.shape[1]) - (U.T @ ptil) @ (qrows @ U)
    _, s, vt = np.linalg.svd(M)
    y = U @ vt[-1]
    rho = np.zeros((g.nt + 1,) + g.shape + (1,))
    rho[1:] = y.reshape((g.nt,) + g.shape + (1,)) / lin.scale[..., None]
    z = lin.z_path(rho)
    return z[..., 0], rho[..., 0], float(s[-1])


# ---------------------------------------------------------------------------
# second-order condition


def random_beta_fields(grid, count: int, seed: int, amplitude: float = 1.0, modes: int = 3) -> np.ndarray:
    """Seeded smooth fields ``(nt+1, *space, dim, count)``, zero on time indices 0..2.

    Each field is a truncated trigonometric series in space and time.
    """
    R = grid.box_halfwidth
    x = grid.points
    tau = (grid.times - grid.t0) / max(grid.T - grid.t0, 1e-300)
    out = np.zeros((grid.nt + 1,) + grid.shape + (grid.dim, count))
    for c in range(count):
        rng = np.random.default_rng([seed, c])
        f = np.zeros((grid.nt + 1,) + grid.shape + (grid.dim,))
        for j in range(1, modes + 1):
            for l in range(modes):
                a = rng.normal(size=grid.dim) / (j + l)
                ph = rng.uniform(0, 2 * np.pi, size=grid.dim + 1)
                space = np.sin(j * np.pi * (x + R) / (2 * R) + ph[:-1])
                time = np.cos(l * np.pi * tau + ph[-1])
                f += a * time.reshape((-1,) + (1,) * (grid.dim + 1)) * space
        f[:BETA_ZERO_STEPS] = 0.0
        out[..., c] = amplitude * f / max(np.max(np.abs(f)), 1e-300)
    return out


def _perturbation_batch(lin: Linearization, beta: np.ndarray) -> np.ndarray:
    g = lin.grid
    if np.any(beta[:BETA_ZERO_STEPS] != 0.0):
        raise ValueError("beta must vanish on the first two time steps")
    q = lin.m[..., None, None] * beta
    src = np.zeros((g.nt + 1,) + g.shape + (beta.shape[-1],))
    for n in range(1, g.nt + 1):
        src[n] = -divergence(q[n], g.weights, g.dx, g.dim)
    rho = forward_linear(g, np.zeros(g.shape + (beta.shape[-1],)), lin.alpha, src)
    mass = np.max(np.abs(g.integrate(np.moveaxis(rho, -1, 1))))
    if mass > MASS_ZERO_TOL:
        raise SolverError(f"perturbation lost zero total mass ({mass:.3e})")
    return rho


def _as_beta(grid, beta) -> tuple[np.ndarray, bool]:
    b = np.asarray(getattr(beta, "values", beta), float)
    single = b.shape == (grid.nt + 1,) + grid.shape + (grid.dim,)
    return (b[..., None] if single else b), single


def solve_perturbation_rho(spec: ProblemSpec, base: MfgSolution, beta) -> np.ndarray:
    """Signed density response ``rho_t - Lap rho + div(rho alpha) + div(m beta) = 0``, ``rho(t0) = 0``.

    ``beta`` is a DriftField or an array ``(nt+1, *space, dim[, k])`` and must
    vanish on time indices 0..2.
    """
    lin = Linearization(spec, base)
    b, single = _as_beta(lin.grid, beta)
    rho = _perturbation_batch(lin, b)
    return rho[..., 0] if single else rho


def _form_batch(lin: Linearization, beta: np.ndarray) -> np.ndarray:
    g = lin.grid
    rho = _perturbation_batch(lin, beta)
    Laa = lin.spec.hamiltonian.legendre_hess(g.points, lin.alpha)
    quad = np.einsum("...ik,...ij,...jk->...k", beta, Laa, beta)
    kin = g.integrate(np.moveaxis(lin.m[..., None] * quad, -1, 1))  # (nt+1, k)
    run = g.integrate(np.moveaxis(lin.second_running(rho) * rho, -1, 1))
    term = g.integrate(np.moveaxis(lin.second_terminal(rho[-1]) * rho[-1], -1, 0))
    return g.dt * (kin[1:].sum(axis=0) + run[:-1].sum(axis=0)) + term


def second_order_form(spec: ProblemSpec, base: MfgSolution, beta) -> float | np.ndarray:
    """Quadratic form ``sum dt <L_aa beta.beta, m> + sum dt <dF rho, rho> + <dG rho(T), rho(T)>``.

    The kinetic term uses right endpoints ``n = 1..nt``, the running term left
    endpoints and the terminal term ``rho(T)``.
    """
    lin = Linearization(spec, base)
    b, single = _as_beta(lin.grid, beta)
    vals = _form_batch(lin, b)
    return float(vals[0]) if single else vals


@dataclass(frozen=True)
class SecondOrderReport:
    descriptors: list
    values: np.ndarray
    minimum: float


def second_order_check(spec: ProblemSpec, base: MfgSolution, count: int = 100, seed: int = 0, batch: int = 25) -> SecondOrderReport:
    """Evaluate the quadratic form on ``count`` seeded random beta fields."""
    lin = Linearization(spec, base)
    vals = []
    for start in range(0, count, batch):
        k = min(batch, count - start)
        betas = random_beta_fields(lin.grid, start + k, seed)[..., start:]
        vals.append(_form_batch(lin, betas))
    values = np.concatenate(vals) if vals else np.zeros(0)
    desc = [f"trig(seed={seed},index={i})" for i in range(count)]
    return SecondOrderReport(desc, values, float(values.min()) if count else float("nan"))


def interior_trajectory_stability(
    spec: ProblemSpec,
    base: MfgSolution,
    fractions=(0.25, 0.5, 0.75),
    config: SolverConfig | None = None,
    sigma_grid=DEFAULT_SIGMA_GRID,
) -> list[dict]:
    """Re-solve from ``(t1, m(t1))`` at interior times and classify each restart."""
    g = base.grid
    rows = []
    for f in fractions:
        n = int(round(f * g.nt))
        t1 = float(g.times[n])
        if n <= 0 or n >= g.nt:
            rows.append({"fraction": f, "t": t1, "status": "excluded"})
            continue
        ms = solve_mfc(spec, t1, base.m[n], config)
        rep = classify_stability(spec, ms.best(), sigma_grid)
        rows.append(
            {
                "fraction": f,
                "t": t1,
                "clusters": len(ms.clusters),
                "unique": ms.unique,
                "verdict": rep.verdict,
                "min_relative_singular_value": min(rep.relative),
                "status": "ok",
            }
        )
    return rows
