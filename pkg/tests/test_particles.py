import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from mfclab.errors import MemoryBudgetError
from mfclab.measures import EmpiricalMeasure, SpaceTimeGrid, gaussian_density
from mfclab.mfg import SolverConfig, solve_mfc
from mfclab.model import ProblemSpec, QuadraticDriftHamiltonian, build_spec, linear_coupling, zero_coupling
from mfclab.pde import solve_fp_forward, solve_hjb_backward
from mfclab.particles import (
    ParticleHamiltonian,
    QuantileTrack,
    chaos_rate_experiment,
    drift_bound,
    fit_power_law,
    sample_initial,
    sampling_floor,
    simulate_mckean_vlasov,
    simulate_meanfield_feedback,
    simulate_optimal_yn,
    solve_vn_small,
    vn_vs_u_gap,
)
from mfclab.particles.ensemble import _rng
from mfclab.particles.small_n import product_points, sample_nodes

SMALL = SpaceTimeGrid(1, 6.0, 49, 0.0, 1.0, 40)


@pytest.fixture(scope="module")
def flat(grid):
    """Constant terminal cost: zero optimal drift, the flow is the heat equation."""
    spec = ProblemSpec("flat", QuadraticDriftHamiltonian(1), zero_coupling(), linear_coupling(lambda x: np.full(x.shape[:-1], 1.0)), grid, check=False)
    sol = solve_mfc(spec, 0.0, gaussian_density(grid, 0.0, 0.5), SolverConfig(multistarts=1)).best()
    return spec, sol


@pytest.fixture(scope="module")
def qfree_small():
    spec = build_spec("quadratic-free", SMALL)
    sol = solve_mfc(spec, 0.0, gaussian_density(SMALL, 0.0, 0.5), SolverConfig(multistarts=1)).best()
    return spec, sol


# ---------------------------------------------------------------------------
# McKean-Vlasov and mean-field feedback ensembles


def test_pure_diffusion_variance(flat):
    spec, sol = flat
    assert np.max(np.abs(sol.alpha.values)) <= 1e-12
    ens = simulate_mckean_vlasov(spec, sol, 20_000, seed=1)
    xT = ens.positions(ens.trajectories.shape[0] - 1)[:, 0]
    target = 0.5 + 2.0 * (sol.grid.T - sol.grid.t0)
    # standard error of the sample variance of a Gaussian: var * sqrt(2 / (n - 1))
    se = target * np.sqrt(2.0 / (xT.size - 1))
    assert abs(xT.var(ddof=1) - target) <= 3 * se
    assert ens.valid and ens.trajectories.shape == (sol.grid.nt + 1, 20_000)


def test_same_seed_bit_identical(solved):
    sol = solved("quadratic-free").best()
    spec = build_spec("quadratic-free")
    a = simulate_mckean_vlasov(spec, sol, 1, seed=7)
    b = simulate_mckean_vlasov(spec, sol, 1, seed=7)
    assert np.array_equal(a.trajectories, b.trajectories)


def test_two_seeds_differ_but_agree_in_mean(specs, solved):
    sol = solved("quadratic-free").best()
    a = simulate_mckean_vlasov(specs["quadratic-free"], sol, 4000, seed=1).trajectories[-1]
    b = simulate_mckean_vlasov(specs["quadratic-free"], sol, 4000, seed=2).trajectories[-1]
    assert not np.array_equal(a, b)
    se = np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    assert abs(a.mean() - b.mean()) <= 4 * se


def test_streams_are_independent(specs, solved):
    sol = solved("quadratic-free").best()
    a = simulate_mckean_vlasov(specs["quadratic-free"], sol, 50, seed=1, stream=0)
    b = simulate_mckean_vlasov(specs["quadratic-free"], sol, 50, seed=1, stream=1)
    assert not np.array_equal(a.trajectories, b.trajectories)


def test_feedback_equals_mckean_vlasov(specs, solved):
    spec, sol = specs["quadratic-free"], solved("quadratic-free").best()
    a = simulate_mckean_vlasov(spec, sol, 64, seed=3)
    b = simulate_meanfield_feedback(spec, sol, 64, seed=3, delta_track=10.0)
    assert np.array_equal(a.trajectories, b.trajectories)
    assert not b.truncated and b.label == "meanfield-feedback"


def test_tracking_flags_and_stops(specs, solved):
    spec, sol = specs["quadratic-free"], solved("quadratic-free").best()
    ens = simulate_meanfield_feedback(spec, sol, 8, seed=0, delta_track=1e-6)
    assert ens.truncated
    k = int(round((ens.tau - ens.t0) / ens.dt))
    stopped = ens.stopped()
    assert np.all(stopped[k:] == stopped[k])
    assert np.array_equal(stopped[: k + 1], ens.trajectories[: k + 1])


def test_truncation_rare_at_large_n(specs, solved):
    spec, sol = specs["quadratic-free"], solved("quadratic-free").best()
    res = chaos_rate_experiment(spec, sol, [64, 512], replicas=20, seed=0)
    assert res.truncated_fraction[-1] <= 0.05


def test_small_n_errors_larger_in_distribution(specs, solved):
    spec, sol = specs["quadratic-free"], solved("quadratic-free").best()
    res = chaos_rate_experiment(spec, sol, [8, 512], replicas=20, seed=100)
    p = mannwhitneyu(res.raw[8], res.raw[512], alternative="greater").pvalue
    assert p <= 1e-3


def test_sample_initial_inverse_cdf(m0):
    x = sample_initial(m0, 50_000, np.random.default_rng(0))
    assert abs(x.mean()) <= 4 * np.sqrt(0.5 / x.size)
    assert x.var() == pytest.approx(0.5, rel=0.03)


def test_sample_initial_2d_rejection():
    g = SpaceTimeGrid(2, 4.0, 41, 0.0, 1.0, 8)
    x = sample_initial(gaussian_density(g, (0.5, -0.5), 0.3), 20_000, np.random.default_rng(1))
    assert x.shape == (20_000, 2)
    assert np.allclose(x.mean(axis=0), [0.5, -0.5], atol=0.03)


def test_quantile_track_matches_wasserstein(solved):
    from mfclab.measures import wasserstein1

    sol = solved("quadratic-free").best()
    track = QuantileTrack(sol.m)
    pts = np.random.default_rng(3).normal(size=37)
    assert track.distance(50, pts) == pytest.approx(wasserstein1(sol.m[50], EmpiricalMeasure(pts)), abs=1e-12)


def test_exchangeability_of_distance(solved):
    sol = solved("quadratic-free").best()
    track = QuantileTrack(sol.m)
    pts = np.random.default_rng(4).normal(size=20)
    assert track.distance(10, pts, 2) == track.distance(10, pts[::-1], 2)


# ---------------------------------------------------------------------------
# small-N value functions


def test_particle_hamiltonian_scaling():
    ph = ParticleHamiltonian(QuadraticDriftHamiltonian(1), 2)
    x = np.array([[0.3, -1.0]])
    p = np.array([[0.5, 2.0]])
    # (1/2) [ (2*0.5)^2 + (2*2)^2 ]
    assert ph.h(x, p)[0] == pytest.approx(0.5 * (1.0 + 16.0))
    assert np.allclose(ph.h_p(x, p), [[2.0, 8.0]])
    assert np.allclose(ph.h_pp(x, p)[0], 4.0 * np.eye(2))


def test_v1_equals_single_agent_value(specs, grid, m0):
    spec = specs["quadratic-free"]
    v1 = solve_vn_small(spec, 1)
    u = solve_hjb_backward(spec, solve_fp_forward(grid, m0, solved_drift_zero(grid)))
    assert np.max(np.abs(v1.values - u.values)) <= 1e-6


def solved_drift_zero(grid):
    from mfclab.pde import DriftField

    return DriftField.zero(grid)


@pytest.fixture(scope="module")
def v2(specs):
    return solve_vn_small(specs["quadratic-free"], 2)


def test_v2_tensorizes(v2, specs):
    v1 = solve_vn_small(specs["quadratic-free"], 1).values
    expected = 0.5 * (v1[:, :, None] + v1[:, None, :])
    assert np.max(np.abs(v2.values - expected)) <= 1e-6


def test_v2_exchangeable(v2):
    assert np.max(np.abs(v2.values - np.swapaxes(v2.values, 1, 2))) <= 1e-10


def test_v3_exchangeable_nonlinear():
    g = SpaceTimeGrid(1, 4.0, 17, 0.0, 0.5, 10)
    v3 = solve_vn_small(build_spec("mean-penalty", g), 3)
    vals = v3.values
    for perm in ((0, 2, 1, 3), (0, 3, 2, 1), (0, 2, 3, 1)):
        assert np.max(np.abs(vals - np.transpose(vals, perm))) <= 1e-10


def test_small_n_argument_checks(specs):
    with pytest.raises(ValueError):
        solve_vn_small(specs["quadratic-free"], 4)
    with pytest.raises(ValueError):
        solve_vn_small(build_spec("quadratic-free", SpaceTimeGrid(2, 3.0, 13, 0.0, 1.0, 8)), 1)
    with pytest.raises(MemoryBudgetError):
        solve_vn_small(specs["quadratic-free"], 3)


def test_product_points_layout(grid):
    pts = product_points(grid, 2)
    assert pts.shape == (grid.nx, grid.nx, 2)
    assert pts[3, 7, 0] == grid.x[3] and pts[3, 7, 1] == grid.x[7]


def test_gap_linear_couplings(specs, v2):
    spec = specs["quadratic-free"]
    for small in (solve_vn_small(spec, 1), v2):
        rep = vn_vs_u_gap(spec, small, count=20, seed=3)
        assert rep["max_gap"] <= 5e-3 and rep["N"] == small.N


def test_gap_zero_at_terminal_time(specs, v2, grid):
    spec = specs["quadratic-free"]
    pts = [(grid.nt, (70, 95)), (grid.nt, (80, 80))]
    rep = vn_vs_u_gap(spec, v2, pts)
    assert rep["max_gap"] == 0.0


def test_gap_nonlinear_finite():
    g = SpaceTimeGrid(1, 6.0, 49, 0.0, 1.0, 20)
    spec = build_spec("mean-penalty", g)
    gaps = [vn_vs_u_gap(spec, solve_vn_small(spec, n), count=6, seed=1, inner=0.125)["max_gap"] for n in (1, 2)]
    assert all(np.isfinite(v) for v in gaps)


def test_gap_rejects_other_grid(specs):
    small = solve_vn_small(build_spec("quadratic-free", SMALL), 1)
    with pytest.raises(ValueError):
        vn_vs_u_gap(specs["quadratic-free"], small, count=1)


def test_sample_nodes_inside(grid):
    for n, idx in sample_nodes(grid, 2, 40, seed=0, inner=0.25):
        assert 0 <= n <= grid.nt
        assert np.all(np.abs(grid.x[list(idx)]) <= 0.25 * grid.box_halfwidth)


# ---------------------------------------------------------------------------
# optimal N-particle trajectories


def test_y1_same_noise_as_meanfield(qfree_small):
    spec, sol = qfree_small
    small = solve_vn_small(spec, 1)
    y = simulate_optimal_yn(spec, small, sol.m[0], seed=5)
    x = simulate_mckean_vlasov(spec, sol, 1, seed=5)
    # identical noise, drifts from the same HJB solution: agreement to interpolation error
    assert np.max(np.abs(y.trajectories - x.trajectories)) <= 1e-8


def test_y2_close_to_meanfield_under_linear_couplings(qfree_small):
    spec, sol = qfree_small
    small = solve_vn_small(spec, 2)
    y = simulate_optimal_yn(spec, small, sol.m[0], seed=8)
    x = simulate_meanfield_feedback(spec, sol, 2, seed=8, delta_track=10.0)
    assert np.max(np.mean(np.abs(y.trajectories - x.trajectories), axis=1)) <= 1e-6


def test_y1_law_matches_flow(qfree_small):
    spec, sol = qfree_small
    small = solve_vn_small(spec, 1)
    yT = np.array([simulate_optimal_yn(spec, small, sol.m[0], seed=s).trajectories[-1, 0] for s in range(200)])
    g = sol.grid
    mT = sol.m.final.values
    mu = g.integrate(g.x * mT)
    var = g.integrate((g.x - mu) ** 2 * mT)
    assert abs(yT.mean() - mu) <= 3.5 * np.sqrt(var / yT.size)
    # Kolmogorov distance to the grid CDF, 1.63 / sqrt(n) is the 1% critical value
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * g.dx * (mT[1:] + mT[:-1]))])
    ys = np.sort(yT)
    F = np.interp(ys, g.x, cdf)
    ks = max(np.max(np.arange(1, ys.size + 1) / ys.size - F), np.max(F - np.arange(ys.size) / ys.size))
    assert ks <= 1.63 / np.sqrt(ys.size)


def test_yn_determinism_and_drift_bound(qfree_small):
    spec, sol = qfree_small
    small = solve_vn_small(spec, 2)
    a = simulate_optimal_yn(spec, small, sol.m[0], seed=2)
    b = simulate_optimal_yn(spec, small, sol.m[0], seed=2)
    assert np.array_equal(a.trajectories, b.trajectories)
    used = float(a.label.split("max_drift=")[1].rstrip(")"))
    assert used <= drift_bound(spec, small) + 1e-12
    assert small.lipschitz_bound > 0


# ---------------------------------------------------------------------------
# chaos experiment


def test_power_law_fit_exact():
    n = np.array([8, 16, 32, 64])
    gamma, c, r2 = fit_power_law(n, 2.0 * n**-0.4)
    assert gamma == pytest.approx(0.4) and c == pytest.approx(2.0) and r2 == pytest.approx(1.0)


def test_chaos_disjoint_seed_blocks_agree(specs, solved):
    spec, sol = specs["quadratic-free"], solved("quadratic-free").best()
    a = chaos_rate_experiment(spec, sol, [64], replicas=20, seed=0)
    b = chaos_rate_experiment(spec, sol, [64], replicas=20, seed=1000)
    assert abs(a.errors[0] - b.errors[0]) <= 2 * (a.ci_halfwidths[0] + b.ci_halfwidths[0])


def test_sampling_floor_below_largest_n(specs, solved):
    spec, sol = specs["quadratic-free"], solved("quadratic-free").best()
    res = chaos_rate_experiment(spec, sol, [128, 512], replicas=10, seed=0)
    assert sampling_floor(sol, 100_000, seed=0) < res.errors[-1]


def test_chaos_single_replica_warns(specs, solved):
    spec, sol = specs["quadratic-free"], solved("quadratic-free").best()
    res = chaos_rate_experiment(spec, sol, [8, 16], replicas=1, seed=0)
    assert res.warnings and all(np.isnan(c) for c in res.ci_halfwidths)
    assert [r["N"] for r in res.csv_rows()] == [8, 16]


def test_chaos_argument_checks(specs, solved, coarse_solved):
    spec, sol = specs["quadratic-free"], solved("quadratic-free").best()
    with pytest.raises(ValueError):
        chaos_rate_experiment(spec, sol, [16, 8], replicas=2, seed=0)
    with pytest.raises(ValueError):
        chaos_rate_experiment(spec, sol, [8], replicas=0, seed=0)
    tw_spec, tw = coarse_solved("two-well")
    with pytest.raises(ValueError):
        chaos_rate_experiment(tw_spec, tw.best(), [8], replicas=2, seed=0)


def test_chaos_threads_identical(specs, solved):
    spec, sol = specs["quadratic-free"], solved("quadratic-free").best()
    a = chaos_rate_experiment(spec, sol, [8, 32], replicas=6, seed=3)
    b = chaos_rate_experiment(spec, sol, [8, 32], replicas=6, seed=3, threads=2)
    assert a.errors == b.errors and a.delta_track == b.delta_track


def test_rng_streams_reproducible():
    assert np.array_equal(_rng(3, 8).standard_normal(4), _rng(3, 8).standard_normal(4))
