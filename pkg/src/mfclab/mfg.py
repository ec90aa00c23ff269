"""Mean-field control solver: damped Picard iteration on the forward-backward system.

The discrete cost matched to the time stepping in :mod:`mfclab.pde` is::

    J(m, alpha) = sum_{n<nt} dt [ <L(x, alpha^{n+1}), (I - dt Lap)^{-1} m^n> + F(m^n) ] + G(m^nt)

With this quadrature the multiplier representation ``J = <u^0, m^0>`` holds
up to the O(dx^2) gap between the upwind Hamiltonian and the Legendre
identity, which keeps cost, value and dynamic-programming checks consistent
at the level of the solver tolerance.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ConvergenceError, MfcLabError, SolverError
from .measures import (
    DensityPath,
    GridDensity,
    SpaceTimeGrid,
    moment,
    wasserstein1,
    wasserstein2,
)
from .model import ProblemSpec
from .pde import (
    DRIFT_LIMIT,
    DriftField,
    ValueField,
    diffusion_factor,
    feedback_drift,
    laplacian,
    solve_fp_forward,
    solve_hjb_backward,
)

log = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    """Parameters of the Picard solver and the multistart/clustering logic.

    ``tol`` bounds the undamped fixed-point defect ``sup_t d1(m_hat, m)``.
    """

    damping: float = 0.5
    min_damping: float = 1.0 / 64.0
    max_iter: int = 400
    tol: float = 1e-8
    multistarts: int = 5
    seed: int = 0
    merge_tol: float = 1e-3
    tie_tol: float = 1e-6
    start_amplitude: float = 1.0
    drift_limit: float = DRIFT_LIMIT
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.multistarts < 1:
            raise ValueError("need at least one start")


@dataclass(frozen=True, eq=False)
class MfgSolution:
    """A converged (or failed) Picard run: multiplier, flow, control and cost."""

    u: ValueField
    m: DensityPath
    alpha: DriftField
    cost: float
    iterations: int
    fixed_point_residual: float
    start_label: str
    converged: bool = True
    unique_global: bool | None = None

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.m.grid


@dataclass(frozen=True, eq=False)
class MinimizerSet:
    """Converged runs grouped into clusters, with the globally minimal ones marked."""

    solutions: list
    clusters: list
    cluster_costs: list
    global_clusters: list
    global_min_cost: float
    logs: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    @property
    def unique(self) -> bool:
        return len(self.global_clusters) == 1

    def representative(self, cluster: int) -> MfgSolution:
        members = self.clusters[cluster]
        return min((self.solutions[i] for i in members), key=lambda s: s.cost)

    def best(self) -> MfgSolution:
        return self.representative(self.global_clusters[0])

    def summary_rows(self) -> list[dict]:
        rows = []
        for c, members in enumerate(self.clusters):
            rows.append(
                {
                    "cluster": c,
                    "cost": self.cluster_costs[c],
                    "members": len(members),
                    "global": c in self.global_clusters,
                    "starts": ";".join(self.solutions[i].start_label for i in members),
                }
            )
        return rows


# ---------------------------------------------------------------------------
# cost


def _diffused(grid: SpaceTimeGrid, values: np.ndarray) -> np.ndarray:
    """``(I - dt Lap)^{-1}`` applied to each time slice of ``values``."""
    backend = kernels.get_backend()
    fac = diffusion_factor(grid.nx, grid.dx, grid.dt, backend)
    batch = np.moveaxis(values, 0, -1)
    out = backend.diffuse(np.ascontiguousarray(batch), fac, grid.dim)
    return np.moveaxis(out, -1, 0)


def running_cost_terms(spec: ProblemSpec, m: DensityPath, alpha: DriftField) -> np.ndarray:
    """Per-step running cost ``dt [<L(alpha^{n+1}), y^n> + F(m^n)]``, n = 0..nt-1."""
    grid = m.grid
    y = _diffused(grid, m.values[:-1])
    lag = spec.hamiltonian.legendre(grid.points, alpha.values[1:])
    kinetic = grid.integrate(lag * y)
    s = spec.running.integrals(m)[:-1]
    running = np.array([spec.running.outer(si) for si in s])
    return grid.dt * (kinetic + running)


def admissibility_defect(m: DensityPath, alpha: DriftField) -> float:
    """Sup-norm gap between ``m`` and the density flow driven by ``alpha`` from ``m(t0)``."""
    re = solve_fp_forward(m.grid, m[0], alpha)
    return float(np.max(np.abs(re.values - m.values)) / max(np.max(np.abs(m.values)), 1e-300))


def evaluate_cost(spec: ProblemSpec, m: DensityPath, alpha: DriftField, *, check: bool = True, tol: float = 1e-8) -> float:
    """Discrete MFC cost of an admissible pair ``(m, alpha)``.

    Raises
    ------
    ValueError
        If ``m`` is not the discrete density flow of ``alpha`` (relative
        sup-norm defect above ``tol``).
    """
    if not m.grid.same_mesh(alpha.grid):
        raise ValueError("flow and control live on different grids")
    if check:
        defect = admissibility_defect(m, alpha)
        if defect > tol:
            raise ValueError(f"inadmissible pair: density equation defect {defect:.3e}")
    return float(np.sum(running_cost_terms(spec, m, alpha)) + spec.terminal.value(m.final))


# ---------------------------------------------------------------------------
# Picard iteration


def _fixed_point_gap(a: DensityPath, b: DensityPath) -> float:
    grid = a.grid
    if grid.dim == 1:
        return max(wasserstein1(a[n], b[n]) for n in range(len(a)))
    # total-variation bound d1 <= R sqrt(d) |a - b|_1 avoids an LP per slice
    tv = grid.integrate(np.abs(a.values - b.values))
    return float(grid.box_halfwidth * np.sqrt(grid.dim) * np.max(tv))


def start_family(grid: SpaceTimeGrid, count: int, amplitude: float, seed: int) -> list[tuple[str, DriftField]]:
    """Deterministic initial drifts followed by seeded smooth random fields."""
    R = grid.box_halfwidth
    x = grid.points
    shape = (grid.nt + 1,) + grid.shape + (grid.dim,)
    fam = [
        ("zero", np.zeros(shape)),
        ("const+", np.full(shape, amplitude)),
        ("const-", np.full(shape, -amplitude)),
        ("linear+", np.broadcast_to(amplitude * x / R, shape)),
        ("linear-", np.broadcast_to(-amplitude * x / R, shape)),
    ]
    k = 0
    while len(fam) < count:
        rng = np.random.default_rng([seed, k])
        field_ = np.zeros(grid.shape + (grid.dim,))
        for j in range(1, 4):
            coef = rng.normal(size=grid.dim) / j
            phase = rng.uniform(0, 2 * np.pi, size=grid.dim)
            field_ += coef * np.sin(j * np.pi * (x + R) / (2 * R) + phase)
        field_ *= amplitude / max(np.max(np.abs(field_)), 1e-12)
        fam.append((f"random-{k}", np.broadcast_to(field_, shape)))
        k += 1
    cap = 0.9 * grid.dx / (grid.dt * grid.dim)
    return [(lbl, DriftField(grid, np.clip(v, -cap, cap))) for lbl, v in fam[:count]]


def picard(
    spec: ProblemSpec,
    grid: SpaceTimeGrid,
    m0: GridDensity,
    init: DriftField,
    cfg: SolverConfig,
    label: str = "start",
    restarts: int = 2,
) -> tuple[MfgSolution, list]:
    """Damped Picard iteration from the flow driven by ``init``.

    The first update is undamped (the best response to the initial guess);
    later updates use ``theta``, halved whenever an oscillation is detected
    (the defect grows and the update direction reverses). If a sub-solver
    fails, the run restarts from the initial flow with every update damped
    and ``theta`` halved, at most ``restarts`` times.
    Returns the final iterate (``converged`` flags success) and the log rows
    ``(iteration, residual, cost, theta)``.
    """
    rows: list = []
    for attempt in range(restarts + 1):
        try:
            return _picard_attempt(spec, grid, m0, init, cfg, label, attempt, rows)
        except SolverError:
            if attempt == restarts:
                raise
            log.info("start %s: sub-solver failure, restarting with damping %.4g", label, cfg.damping / 2 ** (attempt + 1))
    raise AssertionError("unreachable")


def _picard_attempt(spec, grid, m0, init, cfg, label, attempt, rows):
    m = solve_fp_forward(grid, m0, init)
    theta = cfg.damping / 2**attempt
    prev_r, prev_d = np.inf, None
    w = grid.weights
    sol = None
    for k in range(1, cfg.max_iter + 1):
        u = solve_hjb_backward(spec, m, grid)
        alpha = feedback_drift(spec.hamiltonian, u, cfg.drift_limit)
        m_hat = solve_fp_forward(grid, m0, alpha)
        r = _fixed_point_gap(m_hat, m)
        cost = evaluate_cost(spec, m_hat, alpha, check=False)
        rows.append((len(rows), r, cost, theta))
        sol = MfgSolution(u, m_hat, alpha, cost, k - 1, r, label, converged=r <= cfg.tol)
        if r <= cfg.tol:
            return sol, rows
        d = m_hat.values - m.values
        if k == 1 and attempt == 0:
            m = m_hat
        else:
            if prev_d is not None and r > prev_r and np.sum(d * prev_d * w) < 0:
                theta = max(0.5 * theta, cfg.min_damping)
            m = DensityPath(grid, (1.0 - theta) * m.values + theta * m_hat.values)
        prev_r, prev_d = r, d
    return sol, rows


def _run_start(args):
    spec, grid, m0, label, init, cfg = args
    try:
        return picard(spec, grid, m0, init, cfg, label), None
    except MfcLabError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _cluster(solutions: list, tol: float) -> list[list[int]]:
    n = len(solutions)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if find(i) == find(j):
                continue
            a, b = solutions[i], solutions[j]
            if np.max(np.abs(a.u.gradients - b.u.gradients)) > tol:
                continue
            if _fixed_point_gap(a.m, b.m) <= tol:
                parent[find(j)] = find(i)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def solve_mfc(spec: ProblemSpec, t0: float, m0: GridDensity, config: SolverConfig | None = None) -> MinimizerSet:
    """Multistart Picard solve of the MFC problem started at ``(t0, m0)``.

    ``t0`` must be a node of ``spec.grid``'s time mesh; the solve runs on the
    tail of the mesh from ``t0`` to ``T``.

    Raises
    ------
    SolverError
        If every start failed inside a sub-solver.
    ConvergenceError
        If no start reached the tolerance.
    """
    cfg = SolverConfig() if config is None else config
    if not m0.grid.same_space(spec.grid):
        raise ValueError("initial density lives on a different grid")
    n0 = spec.grid.time_index(t0)
    if n0 >= spec.grid.nt:
        raise ValueError("t0 must be strictly before T")
    grid = spec.grid.tail(n0)
    starts = start_family(grid, cfg.multistarts, cfg.start_amplitude, cfg.seed)
    jobs = [(spec, grid, m0, lbl, init, cfg) for lbl, init in starts]
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(_run_start, jobs))
    else:
        results = [_run_start(j) for j in jobs]

    logs, failures, converged = {}, {}, []
    for (lbl, _), (out, err) in zip(starts, results):
        if err is not None:
            failures[lbl] = err
            continue
        sol, rows = out
        logs[lbl] = rows
        if sol.converged:
            converged.append(sol)
        else:
            failures[lbl] = f"not converged after {cfg.max_iter} iterations (residual {sol.fixed_point_residual:.3e})"
    if not converged:
        if failures and all(not v.startswith("not converged") for v in failures.values()):
            raise SolverError("all starts failed in sub-solvers: " + "; ".join(f"{k}: {v}" for k, v in failures.items()))
        raise ConvergenceError("no start converged: " + "; ".join(f"{k}: {v}" for k, v in failures.items()))

    clusters = _cluster(converged, cfg.merge_tol)
    costs = [min(converged[i].cost for i in g) for g in clusters]
    gmin = min(costs)
    tie = cfg.tie_tol * (1.0 + abs(gmin))
    glob = [c for c, v in enumerate(costs) if v <= gmin + tie]
    unique = len(glob) == 1
    converged = [replace(s, unique_global=unique) for s in converged]
    return MinimizerSet(converged, clusters, costs, glob, gmin, logs, failures)


# ---------------------------------------------------------------------------
# value function and diagnostics


class LipschitzTracker:
    """Records evaluated ``(t, m, U)`` triples and the empirical Lipschitz constant."""

    def __init__(self):
        self.points: list[tuple[float, GridDensity, float]] = []

    def add(self, t: float, m: GridDensity, value: float):
        self.points.append((t, m, value))

    def constant(self) -> float:
        best = 0.0
        for i in range(len(self.points)):
            for j in range(i + 1, len(self.points)):
                ti, mi, ui = self.points[i]
                tj, mj, uj = self.points[j]
                den = abs(ti - tj) + wasserstein1(mi, mj)
                if den > 1e-12:
                    best = max(best, abs(ui - uj) / den)
        return best


def value_function(
    spec: ProblemSpec,
    t0: float,
    m0: GridDensity,
    config: SolverConfig | None = None,
    tracker: LipschitzTracker | None = None,
) -> float:
    """``U(t0, m0)``: the smallest cost over the converged clusters."""
    n0 = spec.grid.time_index(t0)
    if n0 == spec.grid.nt:
        value = spec.terminal.value(m0)
    else:
        value = solve_mfc(spec, t0, m0, config).global_min_cost
    if tracker is not None:
        tracker.add(t0, m0, value)
    return value


def master_equation_residual(
    spec: ProblemSpec, sol: MfgSolution, t: float, config: SolverConfig | None = None
) -> float:
    """Discrete residual of the master equation at ``(t, m(t))``.

    With ``D_m U(t, m, x) = Du(t, x)``, the residual is::

        | -dU/dt - <Lap_h u(t), m(t)> + <H(x, D_c u(t)), m(t)> - F(m(t)) |

    where the partial time derivative is the one-sided difference
    ``[U(t + dt, m(t)) - U(t, m(t))] / dt`` of values re-solved from the same
    measure at the two start times.
    """
    if not sol.converged:
        raise ValueError("master residual needs a converged solution")
    cfg = config or SolverConfig(multistarts=1)
    grid = sol.grid
    n = grid.time_index(t)
    if n >= grid.nt:
        raise ValueError("t must be strictly before T")
    base_n = spec.grid.time_index(grid.times[n])
    m_n = sol.m[n]
    u0 = value_function(spec, spec.grid.times[base_n], m_n, cfg)
    u1 = value_function(spec, spec.grid.times[base_n + 1], m_n, cfg)
    dUdt = (u1 - u0) / grid.dt
    u = sol.u.values[n]
    lap = laplacian(u, grid.dx, grid.dim)
    ham = spec.hamiltonian.h(grid.points, sol.u.gradients[n])
    f = spec.running.value(m_n)
    res = -dUdt - grid.integrate(lap * m_n.values) + grid.integrate(ham * m_n.values) - f
    return float(abs(res))


def shift_density(m: GridDensity, shift: float) -> GridDensity:
    x = m.grid.x
    return GridDensity.from_values(m.grid, np.interp(x - shift, x, m.values, left=0.0, right=0.0))


def scale_density(m: GridDensity, factor: float) -> GridDensity:
    """Spatial dilation about the origin by ``factor`` (variance scales by ``factor**2``)."""
    x = m.grid.x
    return GridDensity.from_values(m.grid, np.interp(x / factor, x, m.values, left=0.0, right=0.0))


def bump_density(m: GridDensity, amount: float, center: float = 0.5, width: float = 0.3) -> GridDensity:
    x = m.grid.x
    bump = np.exp(-0.5 * ((x - center) / width) ** 2)
    bump /= m.grid.integrate(bump)
    return GridDensity.from_values(m.grid, (1 - amount) * m.values + amount * bump)


def default_perturbations(m0: GridDensity) -> list[tuple[str, GridDensity]]:
    return [
        ("shift+0.01", shift_density(m0, 0.01)),
        ("shift+0.005", shift_density(m0, 0.005)),
        ("scale1.02", scale_density(m0, 1.02)),
        ("bump0.01", bump_density(m0, 0.01)),
    ]


@dataclass(frozen=True)
class LipschitzReport:
    rows: list
    max_ratio: float
    flagged: list


def lipschitz_diagnostics(
    spec: ProblemSpec,
    t0: float,
    m0: GridDensity,
    perturbations: list | None = None,
    config: SolverConfig | None = None,
) -> LipschitzReport:
    """Ratios ``(|Du1 - Du2|_inf + sup_t d2(m1, m2)) / d2(m0_1, m0_2)`` over perturbations.

    Perturbed problems with several global clusters are flagged and left out
    of the maximum; if the base problem itself has several, only ``"base"`` is
    flagged and no ratio is computed. Zero perturbations (vanishing
    denominator) are excluded.
    """
    if spec.grid.dim != 1:
        raise ValueError("Lipschitz diagnostics are implemented for 1D grids")
    base_set = solve_mfc(spec, t0, m0, config)
    if not base_set.unique:
        return LipschitzReport([{"perturbation": "base", "ratio": float("nan"), "status": "multiple-clusters"}], float("nan"), ["base"])
    base = base_set.best()
    perturbations = default_perturbations(m0) if perturbations is None else perturbations
    rows, flagged = [], []
    best = 0.0
    for label, mp in perturbations:
        den = wasserstein2(m0, mp)
        if den <= 1e-14:
            rows.append({"perturbation": label, "d2_initial": den, "ratio": float("nan"), "status": "excluded"})
            continue
        pset = solve_mfc(spec, t0, mp, config)
        if not pset.unique:
            flagged.append(label)
            rows.append({"perturbation": label, "d2_initial": den, "ratio": float("nan"), "status": "multiple-clusters"})
            continue
        other = pset.best()
        du = float(np.max(np.abs(base.u.gradients - other.u.gradients)))
        dm = max(wasserstein2(base.m[n], other.m[n]) for n in range(len(base.m)))
        ratio = (du + dm) / den
        best = max(best, ratio)
        rows.append({"perturbation": label, "d2_initial": den, "ratio": ratio, "status": "ok"})
    return LipschitzReport(rows, best, flagged)


def running_cost(spec: ProblemSpec, sol: MfgSolution, n0: int, n1: int) -> float:
    """Running cost of ``sol`` accumulated over time steps ``n0..n1-1``."""
    return float(np.sum(running_cost_terms(spec, sol.m, sol.alpha)[n0:n1]))


def restrict(sol: MfgSolution, n: int) -> MfgSolution:
    """The tail of a solution on ``[t_n, T]``."""
    grid = sol.grid.tail(n)
    return MfgSolution(
        ValueField(grid, sol.u.values[n:]),
        DensityPath(grid, sol.m.values[n:]),
        sol.alpha.tail(n),
        float("nan"),
        sol.iterations,
        sol.fixed_point_residual,
        sol.start_label,
        sol.converged,
        sol.unique_global,
    )


def dpp_gap(spec: ProblemSpec, sol: MfgSolution, t1: float, config: SolverConfig | None = None) -> dict:
    """Dynamic-programming check ``U(t0, m0) - [running cost on [t0, t1] + U(t1, m(t1))]``."""
    grid = sol.grid
    n1 = grid.time_index(t1)
    run = running_cost(spec, sol, 0, n1)
    tail_value = value_function(spec, grid.times[n1], sol.m[n1], config)
    gap = sol.cost - (run + tail_value)
    return {"t1": float(grid.times[n1]), "running": run, "tail_value": tail_value, "total": sol.cost, "gap": float(gap)}


def first_order_residual(spec: ProblemSpec, sol: MfgSolution) -> float:
    """``max |D_a L(x, alpha) + Du|`` over the whole space-time grid."""
    dl = spec.hamiltonian.legendre_grad(sol.grid.points, sol.alpha.values)
    return float(np.max(np.abs(dl + sol.u.gradients)))


def feedback_residual(spec: ProblemSpec, sol: MfgSolution) -> float:
    """``max |alpha + H_p(x, Du)|``."""
    return float(np.max(np.abs(sol.alpha.values + spec.hamiltonian.h_p(sol.grid.points, sol.u.gradients))))


def moment_growth(sol: MfgSolution) -> float:
    """``sup_t M2(m(t)) / M2(m(t0))``."""
    m2 = [moment(sol.m[n], 2) for n in range(len(sol.m))]
    return float(max(m2) / m2[0])
