import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from mfclab import kernels
from mfclab.errors import SolverError
from mfclab.measures import (
    DensityPath,
    EmpiricalMeasure,
    GridDensity,
    SpaceTimeGrid,
    density_from_particles,
    gaussian_density,
    moment,
    quantile_pieces,
    wasserstein1,
    wasserstein2,
)


def permutation_oracle(x, y, p):
    """Exhaustive optimal assignment between equal-size uniform clouds."""
    cost = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=-1) ** p
    best = min(sum(cost[i, s[i]] for i in range(len(x))) for s in itertools.permutations(range(len(y))))
    return (best / len(x)) ** (1.0 / p)


def dual_lp_oracle(xa, wa, xb, wb, p):
    """Kantorovich dual ``max <f, a> + <g, b>`` with ``f_i + g_j <= c_ij``."""
    cost = np.linalg.norm(xa[:, None, :] - xb[None, :, :], axis=-1) ** p
    na, nb = len(wa), len(wb)
    rows = []
    for i in range(na):
        for j in range(nb):
            r = np.zeros(na + nb)
            r[i] = r[na + j] = 1.0
            rows.append(r)
    res = linprog(-np.concatenate([wa, wb]), A_ub=np.array(rows), b_ub=cost.reshape(-1), bounds=(None, None), method="highs-ds")
    return (-res.fun) ** (1.0 / p)


# ---------------------------------------------------------------------------
# grid and densities


def test_grid_spacings_exact():
    g = SpaceTimeGrid(1, 4.0, 81, 0.25, 1.25, 40)
    assert g.dx == 8.0 / 80
    assert g.dt == 1.0 / 40
    assert g.times[0] == 0.25 and g.times[-1] == 1.25


@pytest.mark.parametrize(
    "kwargs",
    [dict(nx=7), dict(nt=7), dict(box_halfwidth=0.0), dict(t0=1.0, T=1.0), dict(dim=3)],
)
def test_grid_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        SpaceTimeGrid(**kwargs)


def test_density_invariants(grid):
    with pytest.raises(SolverError):
        GridDensity(grid, -1e-3 * np.ones(grid.shape))
    with pytest.raises(SolverError):
        GridDensity(grid, np.ones(grid.shape))
    m = gaussian_density(grid, 0.0, 1.0)
    assert abs(grid.integrate(m.values) - 1.0) <= 1e-9
    with pytest.raises(ValueError):
        m.values[0] = 1.0


def test_path_slices_are_densities(grid, m0):
    path = DensityPath(grid.tail(grid.nt - 1), np.stack([m0.values, m0.values]))
    assert len(path) == 2 and abs(path.final.mass() - 1.0) <= 1e-9


# ---------------------------------------------------------------------------
# Wasserstein examples


def test_w1_diracs():
    assert wasserstein1(EmpiricalMeasure([0.0]), EmpiricalMeasure([1.0])) == pytest.approx(1.0, abs=1e-14)


def test_w1_identity(m0):
    assert wasserstein1(m0, m0) == pytest.approx(0.0, abs=1e-14)
    assert wasserstein2(m0, m0) == pytest.approx(0.0, abs=1e-14)


def test_w1_two_atoms():
    assert wasserstein1(EmpiricalMeasure([0.0, 1.0]), EmpiricalMeasure([0.0, 3.0])) == pytest.approx(1.0, abs=1e-14)


def test_w2_translation():
    pts = np.array([-1.3, 0.2, 0.7, 2.0])
    assert wasserstein2(EmpiricalMeasure(pts), EmpiricalMeasure(pts + 0.4)) == pytest.approx(0.4, abs=1e-12)


def test_w2_split_dirac():
    assert wasserstein2(EmpiricalMeasure([0.0]), EmpiricalMeasure([-1.0, 1.0])) == pytest.approx(1.0, abs=1e-14)


def test_w2_translation_grid_density():
    g = SpaceTimeGrid(1, 8.0, 321, 0.0, 1.0, 10)
    a, b = gaussian_density(g, 0.0, 0.5), gaussian_density(g, 0.5, 0.5)
    assert wasserstein2(a, b) == pytest.approx(0.5, rel=1e-3)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        wasserstein1(EmpiricalMeasure([0.0]), EmpiricalMeasure(np.zeros((1, 2))))


def test_empty_measure_rejected():
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((0, 1)))


def test_w1_equals_cdf_integral():
    g = SpaceTimeGrid(1, 6.0, 241, 0.0, 1.0, 10)
    a, b = gaussian_density(g, -0.3, 0.4), gaussian_density(g, 0.6, 1.3)
    cdf = lambda m: np.concatenate(([0.0], np.cumsum(0.5 * g.dx * (m.values[:-1] + m.values[1:]))))
    ref = float(np.sum(0.5 * g.dx * np.abs(cdf(a) - cdf(b))[:-1] + 0.5 * g.dx * np.abs(cdf(a) - cdf(b))[1:]))
    assert wasserstein1(a, b) == pytest.approx(ref, abs=5 * g.dx**2)


def _small_pair(rng, dim, same_size):
    ka = int(rng.integers(1, 7))
    kb = ka if same_size else int(rng.integers(1, 7))
    base = rng.normal(size=(4, dim))
    # repeated atoms give non-uniform weights
    xa = base[rng.integers(0, 4, ka)] if rng.random() < 0.3 else rng.normal(size=(ka, dim))
    xb = rng.normal(size=(kb, dim)) + rng.normal(size=dim)
    return xa, xb


@pytest.mark.parametrize("dim", [1, 2])
def test_exhaustive_oracle_equal_sizes(dim):
    rng = np.random.default_rng(dim)
    for _ in range(50):
        xa, xb = _small_pair(rng, dim, True)
        for p, fn in ((1, wasserstein1), (2, wasserstein2)):
            assert fn(EmpiricalMeasure(xa), EmpiricalMeasure(xb)) == pytest.approx(permutation_oracle(xa, xb, p), abs=1e-9)


@pytest.mark.parametrize("dim", [1, 2])
def test_dual_lp_oracle_weighted(dim):
    rng = np.random.default_rng(10 + dim)
    for _ in range(30):
        xa, xb = _small_pair(rng, dim, False)
        wa, wb = rng.uniform(0.1, 1, len(xa)), rng.uniform(0.1, 1, len(xb))
        a, b = EmpiricalMeasure(xa, wa), EmpiricalMeasure(xb, wb)
        for p, fn in ((1, wasserstein1), (2, wasserstein2)):
            assert fn(a, b) == pytest.approx(dual_lp_oracle(xa, a.weights, xb, b.weights, p), abs=1e-9)


small_cloud = st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=6).map(np.array)


@given(small_cloud, small_cloud, small_cloud)
def test_triangle_inequality(a, b, c):
    A, B, C = EmpiricalMeasure(a), EmpiricalMeasure(b), EmpiricalMeasure(c)
    for fn in (wasserstein1, wasserstein2):
        assert fn(A, C) <= fn(A, B) + fn(B, C) + 1e-9


@given(small_cloud, small_cloud)
def test_w1_below_w2_and_symmetric(a, b):
    A, B = EmpiricalMeasure(a), EmpiricalMeasure(b)
    assert wasserstein1(A, B) <= wasserstein2(A, B) + 1e-12
    assert wasserstein1(A, B) == pytest.approx(wasserstein1(B, A), abs=1e-12)


@given(small_cloud)
def test_distance_zero_on_permuted_copy(a):
    A, B = EmpiricalMeasure(a), EmpiricalMeasure(a[::-1])
    assert wasserstein1(A, B) <= 1e-12


@pytest.mark.parametrize("backend", kernels.available())
def test_quantile_kernel_handles_flat_tails(backend, grid):
    """Gaussian tails produce pieces whose cumulative mass rounds to 1 at the top end."""
    sa, a0, a1 = quantile_pieces(gaussian_density(grid, 0.0, 0.5))
    sb, b0, b1 = quantile_pieces(gaussian_density(grid, 1.0, 1.5))
    val = kernels.get_backend(backend).quantile_wasserstein(sa, a0, a1, sb, b0, b1, 2)
    assert np.isfinite(val)
    ref = kernels.get_backend("python").quantile_wasserstein(sa, a0, a1, sb, b0, b1, 2)
    assert val == pytest.approx(ref, abs=1e-13)


def test_2d_grid_densities_subsampled_deterministically():
    g = SpaceTimeGrid(2, 3.0, 25, 0.0, 1.0, 10)
    a, b = gaussian_density(g, (0.0, 0.0), 0.5), gaussian_density(g, (0.5, 0.0), 0.5)
    d1 = wasserstein1(a, b, max_support=200, seed=3)
    assert d1 == wasserstein1(a, b, max_support=200, seed=3)
    assert 0.3 < d1 < 0.7


# ---------------------------------------------------------------------------
# moments and kernel density


def test_moment_examples():
    assert moment(EmpiricalMeasure([2.0]), 2) == pytest.approx(4.0)
    assert moment(EmpiricalMeasure([-1.0, 1.0]), 1) == pytest.approx(1.0)
    g = SpaceTimeGrid(1, 8.0, 321, 0.0, 1.0, 10)
    assert moment(gaussian_density(g, 0.0, 1.0), 2) == pytest.approx(1.0, abs=1e-3)


def test_moment_order_range():
    with pytest.raises(ValueError):
        moment(EmpiricalMeasure([1.0]), 9)


def test_kde_single_particle(grid):
    m = density_from_particles(EmpiricalMeasure([0.0]), grid, 1e-3)
    assert int(np.argmax(m.values)) == grid.nx // 2
    assert m.mass() == pytest.approx(1.0, abs=1e-12)


def test_kde_symmetric(grid):
    m = density_from_particles(EmpiricalMeasure([-1.3, 1.3]), grid, 0.4)
    assert np.allclose(m.values, m.values[::-1], atol=1e-13)


def test_kde_monte_carlo(grid):
    x = np.random.default_rng(0).standard_normal(10_000)
    m = density_from_particles(EmpiricalMeasure(x), grid, 0.2)
    ref = gaussian_density(grid, 0.0, 1.0)
    assert grid.integrate(np.abs(m.values - ref.values)) <= 0.05


def test_kde_bandwidth_positive(grid):
    with pytest.raises(ValueError):
        density_from_particles(EmpiricalMeasure([0.0]), grid, 0.0)
