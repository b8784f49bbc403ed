import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import gamma as gamma_dist
from scipy.stats import norm

from frailtyph.ldtfp import (
    TailfreeForest,
    build_partition,
    conditional_cdf,
    conditional_density,
    finest_set_probs,
    log_prior_density,
    n_internal_nodes,
    node_levels,
    node_path,
    parse_node_path,
    sample_prior,
)


def random_forest(rng, depth=None, q=None, theta=None):
    depth = int(rng.integers(2, 5)) if depth is None else depth
    q = int(rng.integers(0, 3)) if q is None else q
    theta = float(rng.uniform(0.4, 3.0)) if theta is None else theta
    coeffs = rng.normal(scale=1.2, size=(n_internal_nodes(depth), q + 1))
    return TailfreeForest(build_partition(depth, theta), coeffs, 1.0, 10)


def integrate_density(forest, x):
    """Adaptive-quadrature normalization oracle with analytic normal tails."""
    root = math.sqrt(forest.theta)
    lo, hi = -8.0 * root, 8.0 * root
    pts = [b for b in forest.tree.finest_boundaries if lo < b < hi]
    val, _ = quad(
        lambda e: conditional_density(forest, e, x), lo, hi, points=pts, limit=300
    )
    probs = finest_set_probs(forest, x)
    scale = 1 << forest.depth
    tails = (probs[0] + probs[-1]) * scale * norm.cdf(-8.0)
    return val + tails


# ---- partition -----------------------------------------------------------


def test_partition_depth_one_boundary_at_zero():
    tree = build_partition(1, 1.0)
    assert np.array_equal(tree.finest_boundaries, [0.0])


def test_partition_depth_two_quartiles():
    tree = build_partition(2, 1.0)
    want = [norm.ppf(0.25), 0.0, norm.ppf(0.75)]
    assert np.allclose(tree.finest_boundaries, want, atol=1e-12)
    assert tree.finest_boundaries[0] == pytest.approx(-0.6744897501960817)


def test_partition_scaling_with_theta():
    t1 = build_partition(2, 1.0)
    t4 = build_partition(2, 4.0)
    assert np.allclose(t4.finest_boundaries, 2.0 * t1.finest_boundaries)


def test_partition_levels_nest():
    tree = build_partition(4, 2.0)
    for j in range(1, 4):
        coarse = tree.level_boundaries(j)
        fine = tree.level_boundaries(j + 1)
        assert np.allclose(coarse, fine[1::2])


def test_partition_level_sets_have_dyadic_mass():
    tree = build_partition(3, 2.5)
    edges = np.concatenate([[-np.inf], tree.finest_boundaries, [np.inf]])
    masses = np.diff(norm.cdf(edges / math.sqrt(2.5)))
    assert np.allclose(masses, 1.0 / 8.0, atol=1e-12)


def test_invalid_partition_args():
    with pytest.raises(ValueError):
        build_partition(0, 1.0)
    with pytest.raises(ValueError):
        build_partition(2, -1.0)


def test_node_path_roundtrip():
    assert node_path(3, 5) == "RLR"
    for level in (1, 2, 3, 4):
        for idx in range(1 << level):
            assert parse_node_path(node_path(level, idx)) == (level, idx)


# ---- density and cdf --------------------------------------------------------


def test_zero_coefficients_recover_centering_density():
    for theta in (0.5, 1.0, 2.7):
        forest = TailfreeForest(
            build_partition(4, theta), np.zeros((14, 3)), 1.0, 10
        )
        grid = np.linspace(-5 * math.sqrt(theta), 5 * math.sqrt(theta), 301)
        got = conditional_density(forest, grid, [0.3, -1.2])
        want = norm.pdf(grid, scale=math.sqrt(theta))
        assert np.max(np.abs(got - want)) < 1e-12


def test_depth_one_density_is_centering_for_any_forest():
    forest = TailfreeForest(build_partition(1, 1.0), np.zeros((0, 2)), 1.0, 5)
    grid = np.linspace(-4, 4, 101)
    assert np.allclose(conditional_density(forest, grid, [2.0]), norm.pdf(grid), atol=1e-14)


@pytest.mark.parametrize("seed", range(6))
def test_density_integrates_to_one(seed):
    rng = np.random.default_rng(100 + seed)
    forest = random_forest(rng)
    x = rng.normal(size=forest.n_cluster_covariates)
    assert integrate_density(forest, x) == pytest.approx(1.0, abs=1e-6)


def test_density_positive_and_matches_panel_mass():
    rng = np.random.default_rng(2)
    forest = random_forest(rng, depth=3, q=1)
    probs = finest_set_probs(forest, [0.7])
    assert probs.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(probs > 0)


def test_cdf_median_zero_exact():
    rng = np.random.default_rng(3)
    for _ in range(10):
        forest = random_forest(rng)
        x = rng.normal(size=forest.n_cluster_covariates)
        assert conditional_cdf(forest, 0.0, x) == 0.5


def test_cdf_limits():
    rng = np.random.default_rng(4)
    forest = random_forest(rng, depth=3, q=1)
    assert conditional_cdf(forest, 60.0, [0.5]) == pytest.approx(1.0, abs=1e-12)
    assert conditional_cdf(forest, -60.0, [0.5]) == pytest.approx(0.0, abs=1e-12)


def test_cdf_matches_density_by_finite_differences():
    rng = np.random.default_rng(5)
    forest = random_forest(rng, depth=3, q=2, theta=1.3)
    x = rng.normal(size=2)
    bounds = forest.tree.finest_boundaries
    h = 1e-5
    count = 0
    while count < 20:
        e = float(rng.uniform(-3, 3))
        if np.min(np.abs(bounds - e)) < 10 * h:
            continue
        count += 1
        num = (conditional_cdf(forest, e + h, x) - conditional_cdf(forest, e - h, x)) / (2 * h)
        assert num == pytest.approx(conditional_density(forest, e, x), abs=1e-6)


def test_covariate_continuity():
    rng = np.random.default_rng(6)
    forest = random_forest(rng, depth=4, q=1)
    e = 0.37
    base = conditional_density(forest, e, [0.5])
    deltas = [1e-3, 1e-5, 1e-7]
    gaps = [abs(conditional_density(forest, e, [0.5 + d]) - base) for d in deltas]
    assert gaps[0] > gaps[1] > gaps[2] or gaps[0] < 1e-12
    assert gaps[2] < 1e-6


def test_intercept_only_forest_is_exchangeable():
    rng = np.random.default_rng(7)
    coeffs = np.zeros((n_internal_nodes(3), 3))
    coeffs[:, 0] = rng.normal(size=n_internal_nodes(3))
    forest = TailfreeForest(build_partition(3, 1.0), coeffs, 1.0, 10)
    grid = np.linspace(-3, 3, 41)
    a = conditional_density(forest, grid, [0.0, 0.0])
    b = conditional_density(forest, grid, [5.0, -7.0])
    assert np.array_equal(a, b)


def test_density_shape_actually_changes_with_x():
    rng = np.random.default_rng(8)
    forest = random_forest(rng, depth=4, q=1)
    grid = np.linspace(-3, 3, 41)
    a = conditional_density(forest, grid, [-2.0])
    b = conditional_density(forest, grid, [2.0])
    assert np.max(np.abs(a - b)) > 1e-3


# ---- prior sampling and density ----------------------------------------------


def test_sample_prior_deterministic():
    kw = dict(tau1=1.001, tau2=1.001, a_c=1.0, b_c=1.0)
    f1 = sample_prior(4, 10, 2, np.random.default_rng(42), **kw)
    f2 = sample_prior(4, 10, 2, np.random.default_rng(42), **kw)
    assert f1.theta == f2.theta
    assert f1.precision == f2.precision
    assert np.array_equal(f1.node_coeffs, f2.node_coeffs)


def test_sample_prior_infinite_precision_collapses_to_gaussian():
    forest = sample_prior(
        4, 10, 1, np.random.default_rng(0), tau1=2.0, tau2=2.0, c_fixed=np.inf
    )
    assert np.all(forest.node_coeffs == 0.0)
    grid = np.linspace(-3, 3, 61)
    want = norm.pdf(grid, scale=math.sqrt(forest.theta))
    assert np.allclose(conditional_density(forest, grid, [1.0]), want, atol=1e-12)


def test_sample_prior_moments():
    rng = np.random.default_rng(1)
    thetas, coeffs = [], []
    for _ in range(4000):
        f = sample_prior(2, 10, 0, rng, tau1=3.0, tau2=2.0, c_fixed=1.0)
        thetas.append(f.theta**-2)
        coeffs.append(f.node_coeffs.ravel())
    thetas = np.array(thetas)
    assert thetas.mean() == pytest.approx(3.0 / 2.0, abs=4 * thetas.std() / 63.2)
    coeffs = np.array(coeffs)
    # level-1 nodes with rho = 1: variance 2 * 10 / (1 * 1) = 20
    assert coeffs.var() == pytest.approx(20.0, rel=0.1)


def test_sample_prior_rejects_bad_hyper():
    with pytest.raises(ValueError):
        sample_prior(3, 10, 1, np.random.default_rng(0), tau1=-1.0, tau2=1.0)


def test_log_prior_density_closed_form_at_zero():
    # two level-1 node vectors, each of dim 1, variance 2*10/(1*1) = 20
    forest = TailfreeForest(build_partition(2, 1.0), np.zeros((2, 1)), 1.0, 10)
    got = log_prior_density(forest, tau1=1.5, tau2=2.0, a_c=1.0, b_c=1.0)
    want = (
        gamma_dist.logpdf(1.0, 1.5, scale=1 / 2.0)
        + gamma_dist.logpdf(1.0, 1.0, scale=1.0)
        + 2 * norm.logpdf(0.0, scale=math.sqrt(20.0))
    )
    assert got == pytest.approx(want, abs=1e-12)


def test_log_prior_density_decreases_in_coefficient_norm():
    base = TailfreeForest(build_partition(2, 1.0), np.zeros((2, 1)), 1.0, 10)
    bumped = TailfreeForest(build_partition(2, 1.0), np.full((2, 1), 2.0), 1.0, 10)
    kw = dict(tau1=1.5, tau2=2.0, a_c=1.0, b_c=1.0)
    assert log_prior_density(bumped, **kw) < log_prior_density(base, **kw)


@pytest.mark.parametrize("seed", range(10))
def test_log_prior_density_vs_scipy(seed):
    rng = np.random.default_rng(200 + seed)
    depth = int(rng.integers(2, 5))
    q = int(rng.integers(0, 3))
    forest = sample_prior(
        depth, 12, q, rng, tau1=1.3, tau2=0.8, a_c=2.0, b_c=1.5
    )
    got = log_prior_density(forest, tau1=1.3, tau2=0.8, a_c=2.0, b_c=1.5)
    want = gamma_dist.logpdf(forest.theta**-2, 1.3, scale=1 / 0.8)
    want += gamma_dist.logpdf(forest.precision, 2.0, scale=1 / 1.5)
    for r, level in enumerate(node_levels(depth)):
        sd = math.sqrt(2.0 * 12 / (forest.precision * level**2))
        want += norm.logpdf(forest.node_coeffs[r], scale=sd).sum()
    assert got == pytest.approx(want, abs=1e-12)
