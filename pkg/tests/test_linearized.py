from dataclasses import replace

import numpy as np
import pytest

from conftest import UNIQUE_BUILTINS
from mfclab.errors import MemoryBudgetError
from mfclab.measures import SpaceTimeGrid, gaussian_density
from mfclab.mfg import SolverConfig, solve_mfc
from mfclab.model import build_spec
from mfclab.pde import DriftField
from mfclab.linearized import (
    BETA_ZERO_STEPS,
    LinearSources,
    Linearization,
    assemble_operator,
    classify_stability,
    interior_trajectory_stability,
    kernel_vector,
    random_beta_fields,
    second_order_check,
    second_order_form,
    singular_sigma,
    solve_linearized,
    solve_perturbation_rho,
    strong_stability_from_stability_check,
)

TINY = SpaceTimeGrid(1, 4.0, 17, 0.0, 1.0, 8)


@pytest.fixture(scope="module")
def tiny_solved():
    cache = {}

    def get(name, mean=0.0):
        if (name, mean) not in cache:
            spec = build_spec(name, TINY)
            cache[name, mean] = (spec, solve_mfc(spec, 0.0, gaussian_density(TINY, mean, 0.5), SolverConfig()))
        return cache[name, mean]

    return get


@pytest.fixture(scope="module")
def saddle(coarse_solved):
    """The symmetric (non-minimizing) two-well critical point."""
    spec, sols = coarse_solved("two-well")
    c = int(np.argmax(sols.cluster_costs))
    return spec, sols.representative(c)


def rand_sources(grid, rng, scale=1.0):
    return LinearSources(
        R1=scale * rng.normal(size=(grid.nt + 1, grid.nx)) * np.exp(-grid.x**2),
        R2=scale * rng.normal(size=(grid.nt + 1, grid.nx, 1)) * np.exp(-grid.x**2)[:, None],
        R3=scale * np.sin(grid.x),
        xi=scale * grid.x * np.exp(-grid.x**2),
    )


# ---------------------------------------------------------------------------
# linear solve


@pytest.mark.parametrize("sigma", [0.0, 0.5, 1.0])
def test_homogeneous_solution_is_zero(coarse_solved, sigma):
    spec, sols = coarse_solved("mean-penalty")
    out = solve_linearized(spec, sols.best(), sigma)
    assert np.all(out.z == 0.0) and np.all(out.mu == 0.0)


def test_constant_terminal_source_gives_constant_z(coarse_solved):
    spec, sols = coarse_solved("quadratic-free")
    out = solve_linearized(spec, sols.best(), 1.0, LinearSources(R3=np.full(spec.grid.nx, 0.7)))
    assert np.allclose(out.z, 0.7, atol=1e-12)
    assert np.max(np.abs(out.mu)) <= 1e-12


@pytest.mark.parametrize("name", ["mean-penalty", "two-well"])
def test_linearity_in_sources(coarse_solved, name, rng):
    spec, sols = coarse_solved(name)
    base, g = sols.best(), spec.grid
    a, b = rand_sources(g, rng), rand_sources(g, rng, 0.5)
    both = LinearSources(*(x + y for x, y in zip((a.R1, a.R2, a.R3, a.xi), (b.R1, b.R2, b.R3, b.xi))))
    sa = solve_linearized(spec, base, 0.8, a)
    sb = solve_linearized(spec, base, 0.8, b)
    sab = solve_linearized(spec, base, 0.8, both)
    assert np.allclose(sab.mu, sa.mu + sb.mu, atol=1e-9 * np.max(np.abs(sab.mu)))
    assert np.allclose(sab.z, sa.z + sb.z, atol=1e-9 * np.max(np.abs(sab.z)))
    s2 = solve_linearized(spec, base, 0.8, a.scaled(2.0))
    assert np.allclose(s2.mu, 2.0 * sa.mu, atol=1e-10 * np.max(np.abs(s2.mu)))


def test_solution_is_fixed_point(coarse_solved, rng):
    spec, sols = coarse_solved("mean-penalty")
    src = rand_sources(spec.grid, rng)
    out = solve_linearized(spec, sols.best(), 1.0, src)
    lin = Linearization(spec, sols.best())
    z, rho = lin.picard_map(out.mu[..., None], 1.0, src)
    assert np.allclose(rho[..., 0], out.mu, atol=1e-10 * np.max(np.abs(out.mu)))
    assert np.allclose(z[..., 0], out.z, atol=1e-10 * np.max(np.abs(out.z)))


def test_sigma_range_checked(coarse_solved):
    spec, sols = coarse_solved("quadratic-free")
    with pytest.raises(ValueError):
        solve_linearized(spec, sols.best(), 1.5)


def test_linearization_requires_converged_base(coarse_solved):
    spec, sols = coarse_solved("quadratic-free")
    with pytest.raises(ValueError):
        Linearization(spec, replace(sols.best(), converged=False))


# ---------------------------------------------------------------------------
# stability classification


@pytest.mark.parametrize("name", ["two-well", "mean-penalty"])
def test_structured_equals_dense(tiny_solved, name):
    spec, sols = tiny_solved(name, 0.3)
    base = sols.best()
    sig = (0.0, 0.5, 1.0)
    s = classify_stability(spec, base, sig, method="structured")
    d = classify_stability(spec, base, sig, method="dense")
    assert np.allclose(s.min_singular_values, d.min_singular_values, rtol=1e-8, atol=1e-12)
    assert np.allclose(s.relative, d.relative, rtol=1e-8, atol=1e-12)
    assert s.det_signs == d.det_signs and s.verdict == d.verdict


def test_structured_equals_dense_at_saddle():
    g = SpaceTimeGrid(1, 6.0, 25, 0.0, 1.0, 10)
    spec = build_spec("two-well", g)
    sols = solve_mfc(spec, 0.0, gaussian_density(g, 0.0, 0.5), SolverConfig())
    base = sols.representative(int(np.argmax(sols.cluster_costs)))
    s = classify_stability(spec, base, (0.0, 0.5, 1.0))
    d = classify_stability(spec, base, (0.0, 0.5, 1.0), method="dense")
    assert np.allclose(s.min_singular_values, d.min_singular_values, rtol=1e-8)


def test_dense_budget(coarse_solved):
    spec, sols = coarse_solved("mean-penalty")
    lin = Linearization(spec, sols.best())
    with pytest.raises(MemoryBudgetError):
        assemble_operator(lin, 1.0, max_entries=1e4)


def test_dense_operator_identity_at_sigma_zero_for_linear_couplings(tiny_solved):
    spec, sols = tiny_solved("quadratic-free")
    mat = assemble_operator(Linearization(spec, sols.best()), 0.0)
    assert np.allclose(mat, np.eye(len(mat)))


def test_convex_builtin_strongly_stable(coarse_solved):
    spec, sols = coarse_solved("quadratic-free")
    rep = classify_stability(spec, sols.best())
    assert rep.verdict == "strongly_stable"
    assert min(rep.relative) == pytest.approx(1.0)


@pytest.mark.parametrize("name", UNIQUE_BUILTINS)
def test_unique_builtins_strongly_stable(coarse_solved, name):
    spec, sols = coarse_solved(name)
    rep = classify_stability(spec, sols.best())
    assert rep.verdict == "strongly_stable"
    res = strong_stability_from_stability_check(spec, sols.best(), rep)
    assert res["status"] == "consistent" and res["violations"] == []


def test_multiple_global_clusters_inconclusive(coarse_solved):
    spec, sols = coarse_solved("two-well")
    rep = classify_stability(spec, sols.best())
    assert rep.verdict == "inconclusive" and rep.notes
    assert strong_stability_from_stability_check(spec, sols.best(), rep)["status"] == "not-applicable"


def test_saddle_has_singular_crossing(saddle):
    """Between sigma = 0 and 1 the determinant changes sign at the symmetric critical point."""
    spec, base = saddle
    rep = classify_stability(spec, replace(base, unique_global=None), (0.0, 0.5, 1.0))
    assert rep.det_signs[0] > 0 and rep.det_signs[-1] < 0
    assert rep.verdict == "stable"
    sigma_star = singular_sigma(spec, base, 0.0, 1.0)
    assert 0.0 < sigma_star < 1.0
    rep_star = classify_stability(spec, replace(base, unique_global=None), (sigma_star, 1.0))
    assert rep_star.relative[0] <= 1e-8


def test_kernel_vector_satisfies_quadratic_identity(saddle):
    spec, base = saddle
    sigma_star = singular_sigma(spec, base, 0.0, 1.0)
    z, rho, smin = kernel_vector(spec, base, sigma_star)
    assert smin <= 1e-8
    lin = Linearization(spec, base)
    # the vector is (numerically) a fixed point of the homogeneous map
    _, new = lin.picard_map(rho[..., None], sigma_star)
    nrm = lin.norm(rho[..., None])[0]
    assert lin.norm(new - rho[..., None])[0] <= 1e-7 * nrm
    q = lin.quadratic_identity(z[..., None], rho[..., None], sigma_star)[0]
    kin = lin.grid.dt * np.sum(lin.grid.integrate(lin.m * lin.grad(lin.z_hat(z[..., None]))[..., 0, 0] ** 2 * 2.0)[1:])
    assert abs(q) <= 1e-6 * max(kin, 1e-300)


def test_classify_argument_checks(coarse_solved):
    spec, sols = coarse_solved("quadratic-free")
    with pytest.raises(ValueError):
        classify_stability(spec, sols.best(), (0.0, 0.5))
    with pytest.raises(ValueError):
        classify_stability(spec, sols.best(), (0.0, 1.0, 1.5))
    with pytest.raises(ValueError):
        classify_stability(spec, sols.best(), method="lanczos-magic")


def test_report_csv_rows(coarse_solved):
    spec, sols = coarse_solved("quadratic-free")
    rep = classify_stability(spec, sols.best(), (0.0, 1.0))
    rows = rep.csv_rows()
    assert [r["sigma"] for r in rows] == [0.0, 1.0]
    assert all(r["verdict"] == rep.verdict for r in rows)


def test_threads_same_report(coarse_solved):
    spec, sols = coarse_solved("mean-penalty")
    a = classify_stability(spec, sols.best())
    b = classify_stability(spec, sols.best(), threads=2)
    assert a.min_singular_values == b.min_singular_values


# ---------------------------------------------------------------------------
# perturbations and the second-order condition


@pytest.fixture(scope="module")
def flat_base():
    """G = 0: the optimal control is zero and m is the heat flow (box wide enough that the walls are invisible)."""
    g = SpaceTimeGrid(1, 10.0, 81, 0.0, 1.0, 20)
    spec = build_spec("quadratic-free", g, slope=0.0, amp=0.0)
    return spec, solve_mfc(spec, 0.0, gaussian_density(g, 0.0, 0.5), SolverConfig(multistarts=1)).best()


def test_zero_beta_zero_rho(flat_base):
    spec, base = flat_base
    assert np.all(solve_perturbation_rho(spec, base, DriftField.zero(spec.grid)) == 0.0)


def test_constant_beta_moves_mean(flat_base):
    spec, base = flat_base
    g = spec.grid
    assert np.max(np.abs(base.alpha.values)) == 0.0
    b = 0.3
    beta = np.full((g.nt + 1, g.nx, 1), b)
    beta[:BETA_ZERO_STEPS] = 0.0
    rho = solve_perturbation_rho(spec, base, beta)
    first_moment = g.integrate(g.x * rho)
    # d/dt int x rho = int m beta = b on each step with nonzero beta
    steps = np.clip(np.arange(g.nt + 1) - (BETA_ZERO_STEPS - 1), 0, None)
    assert np.allclose(first_moment, b * g.dt * steps, atol=1e-6)
    assert np.max(np.abs(g.integrate(rho))) <= 1e-12


def test_perturbation_antisymmetric(coarse_solved):
    spec, sols = coarse_solved("drifted")
    betas = random_beta_fields(spec.grid, 2, seed=4)
    rho = solve_perturbation_rho(spec, sols.best(), betas)
    neg = solve_perturbation_rho(spec, sols.best(), -betas)
    assert np.allclose(rho, -neg, atol=1e-15)


def test_beta_must_vanish_early(coarse_solved):
    spec, sols = coarse_solved("quadratic-free")
    beta = np.zeros((spec.grid.nt + 1, spec.grid.nx, 1))
    beta[BETA_ZERO_STEPS - 1] = 1.0
    with pytest.raises(ValueError):
        second_order_form(spec, sols.best(), beta)


def test_random_beta_fields_shape_and_support(coarse_grid):
    b = random_beta_fields(coarse_grid, 4, seed=1)
    assert b.shape == (coarse_grid.nt + 1, coarse_grid.nx, 1, 4)
    assert np.all(b[:BETA_ZERO_STEPS] == 0.0)
    assert np.allclose(np.max(np.abs(b), axis=(0, 1, 2)), 1.0)
    assert np.array_equal(b, random_beta_fields(coarse_grid, 4, seed=1))


def test_form_quadratic_homogeneity(coarse_solved):
    spec, sols = coarse_solved("two-well")
    beta = random_beta_fields(spec.grid, 1, seed=2)[..., 0]
    q1 = second_order_form(spec, sols.best(), beta)
    assert second_order_form(spec, sols.best(), 2.5 * beta) == pytest.approx(6.25 * q1, rel=1e-12)


def test_form_is_kinetic_energy_for_linear_couplings(flat_base):
    """With linear couplings only the ``|beta|^2 / 2`` kinetic term survives (L_aa = 1/2)."""
    spec, base = flat_base
    g = spec.grid
    beta = random_beta_fields(g, 1, seed=9)[..., 0]
    expected = g.dt * np.sum(g.integrate(base.m.values * 0.5 * beta[..., 0] ** 2)[1:])
    assert second_order_form(spec, base, beta) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("name", UNIQUE_BUILTINS)
def test_second_order_condition_at_minimizers(coarse_solved, name):
    spec, sols = coarse_solved(name)
    rep = second_order_check(spec, sols.best(), count=100, seed=0)
    assert len(rep.values) == 100 and rep.minimum >= -1e-6


def test_second_order_batches_agree(coarse_solved):
    spec, sols = coarse_solved("mean-penalty")
    a = second_order_check(spec, sols.best(), count=30, seed=5, batch=7)
    b = second_order_check(spec, sols.best(), count=30, seed=5, batch=30)
    assert np.allclose(a.values, b.values, rtol=1e-12)


def test_saddle_violates_second_order_somewhere(saddle):
    """The symmetric critical point is not a minimizer: a mean-shifting beta lowers the cost."""
    spec, base = saddle
    g = spec.grid
    beta = np.ones((g.nt + 1, g.nx, 1))
    beta[:BETA_ZERO_STEPS] = 0.0
    assert second_order_form(spec, base, beta) < 0.0


# ---------------------------------------------------------------------------
# interior restarts


def test_interior_stability_convex(coarse_solved):
    spec, sols = coarse_solved("quadratic-free")
    rows = interior_trajectory_stability(spec, sols.best(), config=SolverConfig(multistarts=3))
    assert len(rows) == 3
    assert all(r["unique"] and r["verdict"] == "strongly_stable" for r in rows)


def test_interior_stability_excludes_endpoints(coarse_solved):
    spec, sols = coarse_solved("quadratic-free")
    rows = interior_trajectory_stability(spec, sols.best(), fractions=(0.0, 1.0), config=SolverConfig(multistarts=1))
    assert [r["status"] for r in rows] == ["excluded", "excluded"]
