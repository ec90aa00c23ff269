"""Problem data: Hamiltonians, Lagrangians, mean-field couplings, builtin specs.

Conventions. The controlled state follows ``dX = alpha dt + sqrt(2) dB``. The
Lagrangian is the Legendre transform ``L(x, a) = sup_p [-a.p - H(x, p)]``, the
optimal feedback is ``alpha = -H_p(x, Du)``, and at that control
``H(x, p) - H_p(x, p).p + L(x, alpha) = 0``.

All evaluators are vectorized: positions and momenta are arrays with a
trailing axis of length ``dim`` and any leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AssumptionError, LegendreError
from .measures import DensityPath, EmpiricalMeasure, GridDensity, SpaceTimeGrid

NEWTON_MAX_ITER = 100


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=-1)


# ---------------------------------------------------------------------------
# Hamiltonians


class Hamiltonian:
    """Base class: convex in ``p``, with numerical fallbacks for the transform.

    Subclasses provide ``h``, ``h_p``, ``h_x`` and ``h_pp``; the Legendre
    transform, its derivatives and the minimizer ``p*(x)`` of ``h(x, .)`` are
    computed by damped Newton unless overridden analytically. ``separable``
    declares ``h(x, p) = c(x) + sum_k h_k(x, p_k)``, which the upwind scheme
    relies on.
    """

    descriptor = "generic"
    separable = True

    def __init__(self, dim: int = 1):
        self.dim = dim

    def h(self, x, p):  # pragma: no cover - abstract
        raise NotImplementedError

    def h_p(self, x, p):  # pragma: no cover - abstract
        raise NotImplementedError

    def h_x(self, x, p):  # pragma: no cover - abstract
        raise NotImplementedError

    def h_pp(self, x, p):  # pragma: no cover - abstract
        raise NotImplementedError

    # --- convex duality -------------------------------------------------

    def _newton(self, x, a, starts):
        """Minimize ``phi(p) = h(x, p) + a.p`` pointwise; returns p-hat.

        Each start is only run at points where the previous starts failed.
        """
        x = np.asarray(x, float)
        a = np.asarray(a, float)
        shape = np.broadcast_shapes(x.shape, a.shape)
        d = shape[-1]
        xf = np.broadcast_to(x, shape).reshape(-1, d)
        af = np.broadcast_to(a, shape).reshape(-1, d)
        out = np.full(xf.shape, np.nan)
        todo = np.arange(xf.shape[0])
        worst = 0.0
        for p0 in starts:
            if todo.size == 0:
                break
            p0f = np.broadcast_to(np.asarray(p0, float), shape).reshape(-1, d)
            p, res = self._newton_block(xf[todo], af[todo], p0f[todo].copy())
            ok = np.isfinite(res) & (res <= 1e-10 * (1.0 + np.linalg.norm(af[todo], axis=-1) + np.linalg.norm(p, axis=-1)))
            out[todo[ok]] = p[ok]
            if np.any(~ok):
                worst = max(worst, float(np.nanmax(res[~ok])))
            todo = todo[~ok]
        if todo.size:
            raise LegendreError(
                f"Newton did not converge at {todo.size} points "
                f"after {NEWTON_MAX_ITER} iterations (max gradient residual {worst:.3e})"
            )
        return out.reshape(shape)

    def _newton_block(self, x, a, p):
        """Damped Newton with backtracking on flat arrays; returns ``(p, |grad|)``."""
        active = np.arange(x.shape[0])
        res = np.full(x.shape[0], np.inf)
        for _ in range(NEWTON_MAX_ITER):
            xa, aa, pa = x[active], a[active], p[active]
            g = self.h_p(xa, pa) + aa
            gn = np.linalg.norm(g, axis=-1)
            res[active] = gn
            done = gn <= 1e-13 * (1.0 + np.linalg.norm(aa, axis=-1) + np.linalg.norm(pa, axis=-1))
            active, xa, aa, pa, g = active[~done], xa[~done], aa[~done], pa[~done], g[~done]
            if active.size == 0:
                break
            step = -np.linalg.solve(self.h_pp(xa, pa), g[..., None])[..., 0]
            phi0 = self.h(xa, pa) + _dot(aa, pa)
            t = np.ones(active.size)
            for _ in range(40):
                trial = pa + t[:, None] * step
                bad = self.h(xa, trial) + _dot(aa, trial) > phi0 + 1e-15 * np.abs(phi0)
                if not np.any(bad):
                    break
                t = np.where(bad, 0.5 * t, t)
            new = pa + t[:, None] * step
            stalled = np.all(new == pa, axis=-1)
            p[active] = new
            if np.any(stalled):
                # no further progress possible in floating point
                res[active[stalled]] = np.linalg.norm(self.h_p(xa[stalled], new[stalled]) + aa[stalled], axis=-1)
                active = active[~stalled]
        if active.size:
            res[active] = np.linalg.norm(self.h_p(x[active], p[active]) + a[active], axis=-1)
        return p, res

    def p_hat(self, x, a):
        """Maximizer of ``-a.p - h(x, p)``, i.e. the solution of ``h_p(x, p) = -a``."""
        a = np.asarray(a, float)
        return self._newton(x, a, [np.zeros_like(a), -a, a])

    def p_star(self, x):
        """Minimizer of ``h(x, .)`` (used by the upwind numerical Hamiltonian)."""
        x = np.asarray(x, float)
        return self.p_hat(x, np.zeros_like(x))

    def legendre(self, x, a):
        """``L(x, a) = sup_p [-a.p - h(x, p)]``."""
        p = self.p_hat(x, a)
        return -_dot(np.asarray(a, float), p) - self.h(x, p)

    def legendre_grad(self, x, a):
        """``D_a L(x, a) = -p_hat(x, a)`` by the envelope theorem."""
        return -self.p_hat(x, a)

    def legendre_hess(self, x, a):
        """``L_aa(x, a) = h_pp(x, p_hat)^{-1}``."""
        return np.linalg.inv(self.h_pp(x, self.p_hat(x, a)))

    # --- scheme support -------------------------------------------------

    def numerical(self, x, p_minus, p_plus, p_star=None):
        """Engquist-Osher upwind Hamiltonian for separable ``h``.

        Per coordinate ``k`` the backward difference contributes through the
        branch where ``h`` increases (``p >= p*``) and the forward difference
        through the decreasing branch. The result equals ``h(x, p)`` whenever
        both differences equal ``p`` and is nondecreasing in ``p_minus`` and
        nonincreasing in ``p_plus``.
        """
        ps = self.p_star(x) if p_star is None else p_star
        base = self.h(x, ps)
        total = base.copy()
        for k in range(self.dim):
            q = ps.copy()
            q[..., k] = np.maximum(p_minus[..., k], ps[..., k])
            total += self.h(x, q) - base
            q[..., k] = np.minimum(p_plus[..., k], ps[..., k])
            total += self.h(x, q) - base
        return total


class QuadraticDriftHamiltonian(Hamiltonian):
    """``h(x, p) = c |p|^2 + V(x).p`` with analytic conjugate ``|a + V|^2 / (4c)``."""

    descriptor = "quadratic-plus-drift"

    def __init__(self, dim: int = 1, coef: float = 1.0, drift=None, drift_jac=None, label: str = ""):
        super().__init__(dim)
        if not coef > 0:
            raise AssumptionError("quadratic coefficient must be positive")
        self.coef = float(coef)
        self._drift = drift
        self._drift_jac = drift_jac
        self.label = label or ("|p|^2" if drift is None else "|p|^2 + V.p")

    def V(self, x):
        x = np.asarray(x, float)
        return np.zeros_like(x) if self._drift is None else self._drift(x)

    def DV(self, x):
        x = np.asarray(x, float)
        if self._drift is None:
            return np.zeros(x.shape + (self.dim,))
        return self._drift_jac(x)

    def h(self, x, p):
        return self.coef * _dot(p, p) + _dot(self.V(x), p)

    def h_p(self, x, p):
        return 2.0 * self.coef * np.asarray(p, float) + self.V(x)

    def h_x(self, x, p):
        return np.einsum("...ji,...j->...i", self.DV(x), np.asarray(p, float))

    def h_pp(self, x, p):
        shape = np.broadcast_shapes(np.shape(x), np.shape(p))
        return 2.0 * self.coef * np.broadcast_to(np.eye(self.dim), shape + (self.dim,)).copy()

    def p_hat(self, x, a):
        return -(np.asarray(a, float) + self.V(x)) / (2.0 * self.coef)

    def p_star(self, x):
        return -self.V(x) / (2.0 * self.coef)

    def legendre(self, x, a):
        v = np.asarray(a, float) + self.V(x)
        return _dot(v, v) / (4.0 * self.coef)

    def legendre_hess(self, x, a):
        shape = np.broadcast_shapes(np.shape(x), np.shape(a))
        return np.broadcast_to(np.eye(self.dim) / (2.0 * self.coef), shape + (self.dim,)).copy()


class LogCoshHamiltonian(Hamiltonian):
    """``h(x, p) = c |p|^2 + eps sum_k log cosh(p_k) + V(x).p``.

    Strictly convex and separable with no closed-form conjugate, so the
    Legendre transform goes through the Newton path.
    """

    descriptor = "quadratic-logcosh"

    def __init__(self, dim: int = 1, coef: float = 1.0, eps: float = 0.5, drift=None, drift_jac=None):
        super().__init__(dim)
        self.coef, self.eps = float(coef), float(eps)
        self._inner = QuadraticDriftHamiltonian(dim, coef, drift, drift_jac)

    @staticmethod
    def _logcosh(p):
        a = np.abs(p)
        return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)

    def h(self, x, p):
        return self._inner.h(x, p) + self.eps * np.sum(self._logcosh(np.asarray(p, float)), axis=-1)

    def h_p(self, x, p):
        return self._inner.h_p(x, p) + self.eps * np.tanh(p)

    def h_x(self, x, p):
        return self._inner.h_x(x, p)

    def h_pp(self, x, p):
        sech2 = 1.0 / np.cosh(np.asarray(p, float)) ** 2
        out = self._inner.h_pp(x, p)
        idx = np.arange(self.dim)
        out[..., idx, idx] += self.eps * sech2
        return out


# ---------------------------------------------------------------------------
# couplings


def _integrals_of(features_values, m) -> np.ndarray:
    if isinstance(m, GridDensity):
        return np.array([m.grid.integrate(features_values[..., j] * m.values) for j in range(features_values.shape[-1])])
    return m.weights @ features_values


@dataclass(frozen=True, eq=False)
class CylindricalCoupling:
    """``C(m) = Phi(int phi_1 dm, ..., int phi_k dm)`` with exact flat derivatives.

    ``features(x)`` returns the stacked ``phi_j(x)`` with shape ``(..., k)``;
    ``outer``, ``outer_grad`` and ``outer_hess`` evaluate ``Phi`` and its
    first two derivatives at the vector of feature integrals.
    """

    name: str
    features: Callable[[np.ndarray], np.ndarray]
    outer: Callable[[np.ndarray], float]
    outer_grad: Callable[[np.ndarray], np.ndarray]
    outer_hess: Callable[[np.ndarray], np.ndarray] | None = None
    is_linear: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    def features_on(self, grid: SpaceTimeGrid) -> np.ndarray:
        key = (grid.dim, grid.nx, grid.box_halfwidth)
        if key not in self._cache:
            self._cache[key] = np.asarray(self.features(grid.points), float)
        return self._cache[key]

    def integrals(self, m) -> np.ndarray:
        """Feature integrals of a grid density, empirical measure or path."""
        if isinstance(m, DensityPath):
            phi = self.features_on(m.grid)
            return np.stack([m.grid.integrate(phi[..., j] * m.values) for j in range(phi.shape[-1])], axis=-1)
        if isinstance(m, GridDensity):
            return _integrals_of(self.features_on(m.grid), m)
        if isinstance(m, EmpiricalMeasure):
            return _integrals_of(np.asarray(self.features(m.points), float), m)
        raise TypeError(f"unsupported measure {type(m).__name__}")

    def value(self, m) -> float:
        return float(self.outer(self.integrals(m)))

    def flat_derivative(self, x, m) -> np.ndarray:
        """``F(x, m) = sum_j dPhi_j(s) phi_j(x)``."""
        return np.asarray(self.features(x), float) @ self.outer_grad(self.integrals(m))

    def second_flat_derivative(self, x, m, y) -> np.ndarray:
        """``sum_jk d2Phi_jk(s) phi_j(x) phi_k(y)`` as an array over (x, y)."""
        if self.outer_hess is None:
            raise ValueError(f"coupling {self.name!r} has no second flat derivative")
        hess = self.outer_hess(self.integrals(m))
        fx = np.asarray(self.features(x), float)
        fy = np.asarray(self.features(y), float)
        return fx @ hess @ np.swapaxes(fy, -1, -2)

    # grid-level helpers used by the solvers

    def grid_derivative(self, grid: SpaceTimeGrid, s: np.ndarray) -> np.ndarray:
        """Flat derivative on the grid nodes given feature integrals ``s``."""
        return self.features_on(grid) @ self.outer_grad(s)

    def grid_second_apply(self, grid: SpaceTimeGrid, s: np.ndarray, rho: np.ndarray) -> np.ndarray:
        """``x -> int d2C/dm2(x, m, y) rho(y) dy`` for signed nodal densities.

        ``rho`` has shape ``(*grid.shape, k)`` (a batch of densities); the
        result has the same shape.
        """
        if self.outer_hess is None:
            raise ValueError(f"coupling {self.name!r} has no second flat derivative")
        phi = self.features_on(grid)
        w = grid.weights[..., None, None]
        mom = np.sum(phi[..., :, None] * rho[..., None, :] * w, axis=tuple(range(grid.dim)))
        return phi @ (self.outer_hess(s) @ mom)


def linear_coupling(g: Callable[[np.ndarray], np.ndarray], name: str = "linear") -> CylindricalCoupling:
    """``C(m) = int g dm``."""
    return CylindricalCoupling(
        name=name,
        features=lambda x: np.asarray(g(x), float)[..., None],
        outer=lambda s: float(s[0]),
        outer_grad=lambda s: np.ones(1),
        outer_hess=lambda s: np.zeros((1, 1)),
        is_linear=True,
    )


def zero_coupling() -> CylindricalCoupling:
    return linear_coupling(lambda x: np.zeros(np.shape(x)[:-1]), name="zero")


def mean_coupling(phi, dphi, d2phi, name: str, axis: int = 0) -> CylindricalCoupling:
    """``C(m) = Phi(int x_axis dm)`` for a scalar function ``Phi``."""
    return CylindricalCoupling(
        name=name,
        features=lambda x: np.asarray(x, float)[..., axis : axis + 1],
        outer=lambda s: float(phi(s[0])),
        outer_grad=lambda s: np.array([dphi(s[0])]),
        outer_hess=lambda s: np.array([[d2phi(s[0])]]),
    )


# ---------------------------------------------------------------------------
# assumption checks


@dataclass(frozen=True)
class HamiltonianReport:
    c_R: float
    C_R: float
    growth_C: float
    fd_error_p: float
    fd_error_x: float
    fd_error_pp: float
    samples: int

    @property
    def passed(self) -> bool:
        return self.c_R > 0 and np.isfinite(self.growth_C) and max(
            self.fd_error_p, self.fd_error_x, self.fd_error_pp
        ) <= 1e-6


def sample_xp(dim: int, halfwidth: float, p_max: float, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    x = rng.uniform(-halfwidth, halfwidth, size=(n, dim))
    direction = rng.normal(size=(n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = p_max * rng.uniform(0, 1, size=(n, 1)) ** (1.0 / dim)
    return x, direction * radius


def _fd_grad(fn, z, eps):
    out = []
    for k in range(z.shape[-1]):
        e = np.zeros(z.shape[-1])
        e[k] = eps
        out.append((fn(z + e) - fn(z - e)) / (2 * eps))
    return np.stack(out, axis=-1)


def check_hamiltonian(h: Hamiltonian, halfwidth: float, *, n: int = 400, p_max: float = 10.0, seed: int = 0) -> HamiltonianReport:
    """Sampled convexity, growth and derivative-consistency checks."""
    rng = np.random.default_rng(seed)
    x, p = sample_xp(h.dim, halfwidth, p_max, n, rng)
    eig = np.linalg.eigvalsh(h.h_pp(x, p))
    c_R, C_R = float(eig.min()), float(eig.max())

    hv = h.h(x, p)
    p2 = np.sum(p * p, axis=-1)
    # smallest C on a geometric ladder with -C + |p|^2/C <= h <= C(1 + |p|^2)
    growth = np.inf
    for C in np.geomspace(1.0, 1e6, 121):
        if np.all(hv <= C * (1 + p2) + 1e-12) and np.all(-C + p2 / C <= hv + 1e-12):
            growth = float(C)
            break

    eps = 1e-5
    scale = 1.0 + np.abs(hv)
    err_p = np.max(np.abs(_fd_grad(lambda q: h.h(x, q), p, eps) - h.h_p(x, p)) / scale[:, None])
    err_x = np.max(np.abs(_fd_grad(lambda y: h.h(y, p), x, eps) - h.h_x(x, p)) / scale[:, None])
    hp_scale = 1.0 + np.linalg.norm(h.h_p(x, p), axis=-1)
    fd_pp = np.stack(
        [_fd_grad(lambda q, i=i: h.h_p(x, q)[..., i], p, eps) for i in range(h.dim)], axis=-2
    )
    err_pp = np.max(np.abs(fd_pp - h.h_pp(x, p)) / hp_scale[:, None, None])
    return HamiltonianReport(c_R, C_R, growth, float(err_p), float(err_x), float(err_pp), n)


@dataclass(frozen=True)
class CouplingReport:
    first_order_error: float
    second_order_error: float

    @property
    def passed(self) -> bool:
        return self.first_order_error <= 1e-4 and self.second_order_error <= 1e-4


def _random_measure(dim: int, halfwidth: float, rng, n: int = 12) -> EmpiricalMeasure:
    pts = rng.uniform(-0.5 * halfwidth, 0.5 * halfwidth, size=(n, dim))
    return EmpiricalMeasure(pts, rng.uniform(0.1, 1.0, size=n))


def check_coupling(c: CylindricalCoupling, dim: int, halfwidth: float, *, trials: int = 8, seed: int = 0) -> CouplingReport:
    """Directional-difference check of the flat derivatives with Richardson extrapolation.

    Mixtures ``(1 - s) m + s m'`` are evaluated through the feature integrals,
    which are affine in the measure.
    """
    rng = np.random.default_rng(seed)
    err1 = err2 = 0.0
    s1, s2 = 1e-3, 1e-4
    for _ in range(trials):
        m, mp = _random_measure(dim, halfwidth, rng), _random_measure(dim, halfwidth, rng)
        a, b = c.integrals(m), c.integrals(mp)
        base = c.outer(a)

        def quotient(s):
            return (c.outer((1 - s) * a + s * b) - base) / s

        rich = (s1 * quotient(s2) - s2 * quotient(s1)) / (s1 - s2)
        exact = float(mp.weights @ c.flat_derivative(mp.points, m) - m.weights @ c.flat_derivative(m.points, m))
        err1 = max(err1, abs(rich - exact) / (1.0 + abs(exact)))
        if c.outer_hess is not None:
            x = rng.uniform(-halfwidth / 2, halfwidth / 2, size=(5, dim))
            f0 = np.asarray(c.features(x), float) @ c.outer_grad(a)

            def dquot(s):
                return (np.asarray(c.features(x), float) @ c.outer_grad((1 - s) * a + s * b) - f0) / s

            rich2 = (s1 * dquot(s2) - s2 * dquot(s1)) / (s1 - s2)
            k2 = c.second_flat_derivative(x, m, mp.points) @ mp.weights - c.second_flat_derivative(
                x, m, m.points
            ) @ m.weights
            err2 = max(err2, float(np.max(np.abs(rich2 - k2) / (1.0 + np.abs(k2)))))
    return CouplingReport(float(err1), float(err2))


# ---------------------------------------------------------------------------
# problem specification


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Hamiltonian, running and terminal couplings, and the discretization grid."""

    name: str
    hamiltonian: Hamiltonian
    running: CylindricalCoupling
    terminal: CylindricalCoupling
    grid: SpaceTimeGrid
    params: dict = field(default_factory=dict)
    check: bool = True
    reports: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.hamiltonian.dim != self.grid.dim:
            raise ValueError("Hamiltonian and grid dimensions differ")
        if not self.check:
            return
        rep = check_hamiltonian(self.hamiltonian, self.grid.box_halfwidth)
        if not rep.passed:
            raise AssumptionError(f"{self.name}: Hamiltonian checks failed: {rep}")
        self.reports["hamiltonian"] = rep
        for label, c in (("running", self.running), ("terminal", self.terminal)):
            crep = check_coupling(c, self.grid.dim, self.grid.box_halfwidth)
            if not crep.passed:
                raise AssumptionError(f"{self.name}: {label} coupling consistency failed: {crep}")
            self.reports[label] = crep

    @property
    def T(self) -> float:
        return self.grid.T

    @property
    def linear_couplings(self) -> bool:
        return self.running.is_linear and self.terminal.is_linear

    def with_grid(self, grid: SpaceTimeGrid) -> "ProblemSpec":
        return ProblemSpec(self.name, self.hamiltonian, self.running, self.terminal, grid, dict(self.params), check=False, reports=self.reports)


def duality_identities(h: Hamiltonian, x, p) -> dict:
    """Residuals of ``H - H_p.p + L(x, alpha)`` and ``D_a L(x, alpha) + p`` at ``alpha = -H_p``."""
    x = np.asarray(x, float)
    p = np.asarray(p, float)
    alpha = -h.h_p(x, p)
    r1 = h.h(x, p) - _dot(h.h_p(x, p), p) + h.legendre(x, alpha)
    r2 = h.legendre_grad(x, alpha) + p
    return {
        "alpha": alpha,
        "hamiltonian_residual": float(np.max(np.abs(r1))),
        "gradient_residual": float(np.max(np.abs(r2))),
        "passed": bool(np.max(np.abs(r1)) <= 1e-7 and np.max(np.abs(r2)) <= 1e-7),
    }


# ---------------------------------------------------------------------------
# builtin library


def default_grid(dim: int = 1) -> SpaceTimeGrid:
    if dim == 1:
        return SpaceTimeGrid(1, 8.0, 161, 0.0, 1.0, 100)
    return SpaceTimeGrid(2, 6.0, 49, 0.0, 1.0, 50)


def _well_g(slope: float, amp: float, width: float):
    def g(x):
        r2 = np.sum(np.asarray(x, float) ** 2, axis=-1)
        return slope * np.asarray(x, float)[..., 0] - amp * np.exp(-0.5 * r2 / width**2)

    return g


def _tanh_drift(scale: float):
    return (lambda x: scale * np.tanh(x), lambda x: _diag(scale / np.cosh(x) ** 2))


def _diag(v):
    out = np.zeros(v.shape + (v.shape[-1],))
    idx = np.arange(v.shape[-1])
    out[..., idx, idx] = v
    return out


def _quadratic_free(grid, slope=0.5, amp=0.5, width=1.0):
    return (
        QuadraticDriftHamiltonian(grid.dim),
        zero_coupling(),
        linear_coupling(_well_g(slope, amp, width), name="terminal-linear"),
    )


def _drifted(grid, drift_scale=1.0, running_amp=0.2, slope=0.5, amp=0.5, width=1.0):
    V, DV = _tanh_drift(drift_scale)

    def f(x):
        r2 = np.sum(np.asarray(x, float) ** 2, axis=-1)
        return running_amp * r2 / (1.0 + r2)

    return (
        QuadraticDriftHamiltonian(grid.dim, 1.0, V, DV),
        linear_coupling(f, name="running-linear"),
        linear_coupling(_well_g(slope, amp, width), name="terminal-linear"),
    )


def _two_well(grid, kappa=0.5, a=1.0):
    phi = lambda s: kappa * (s * s - a * a) ** 2
    dphi = lambda s: 4.0 * kappa * s * (s * s - a * a)
    d2phi = lambda s: 4.0 * kappa * (3.0 * s * s - a * a)
    return QuadraticDriftHamiltonian(grid.dim), zero_coupling(), mean_coupling(phi, dphi, d2phi, "double-well-mean")


def _mean_penalty(grid, k_run=1.0, target=0.5, k_term=2.0):
    run = mean_coupling(
        lambda s: 0.5 * k_run * (s - target) ** 2, lambda s: k_run * (s - target), lambda s: k_run, "running-mean-penalty"
    )
    term = mean_coupling(lambda s: 0.5 * k_term * s * s, lambda s: k_term * s, lambda s: k_term, "terminal-mean-penalty")
    return QuadraticDriftHamiltonian(grid.dim), run, term


def _log_cosh(grid, eps=0.5, drift_scale=0.0, slope=0.5, amp=0.5, width=1.0):
    V, DV = _tanh_drift(drift_scale)
    return (
        LogCoshHamiltonian(grid.dim, 1.0, eps, V, DV),
        zero_coupling(),
        linear_coupling(_well_g(slope, amp, width), name="terminal-linear"),
    )


BUILTINS: dict[str, Callable] = {
    "quadratic-free": _quadratic_free,
    "drifted": _drifted,
    "two-well": _two_well,
    "mean-penalty": _mean_penalty,
    "log-cosh": _log_cosh,
}


def build_spec(descriptor: str, grid: SpaceTimeGrid | None = None, **params) -> ProblemSpec:
    """Construct a builtin spec by descriptor name and numeric parameters."""
    if descriptor not in BUILTINS:
        raise KeyError(f"unknown descriptor {descriptor!r}")
    grid = default_grid() if grid is None else grid
    factory = BUILTINS[descriptor]
    try:
        h, run, term = factory(grid, **params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {descriptor!r}: {exc}") from None
    return ProblemSpec(descriptor, h, run, term, grid, dict(params))


def builtin_library(grid: SpaceTimeGrid | None = None) -> list[ProblemSpec]:
    """All builtin specs with default parameters."""
    return [build_spec(name, grid) for name in BUILTINS]
