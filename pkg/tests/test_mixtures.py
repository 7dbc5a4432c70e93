import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metapose.errors import EmptyHeatmap
from metapose.mixtures import (LOG_EPS, EmConfig, GaussianMixture2D, HeatmapGrid, MixtureSet,
                               em_iterations, fit_gmm, log_prob, mixture_log_prob_grad,
                               weighted_log_likelihood)
from metapose.scenegen import to_heatmap_grid

mpmath.mp.dps = 50


def mp_log_prob(g, x):
    """Extended precision reference for the epsilon-regularized mixture log-density."""
    total = mpmath.mpf(0)
    for w, mu, s in zip(g.weights, g.means, g.sigmas):
        var = mpmath.mpf(s) ** 2
        d2 = (mpmath.mpf(x[0]) - mpmath.mpf(mu[0])) ** 2 + (mpmath.mpf(x[1]) - mpmath.mpf(mu[1])) ** 2
        coef = mpmath.mpf(w) / (2 * mpmath.pi * var) + mpmath.mpf(LOG_EPS)
        total += coef * mpmath.exp(-d2 / (2 * var))
    return mpmath.log(total)


def gaussian_grid(mean, sigma, size):
    return to_heatmap_grid(GaussianMixture2D.single(mean, sigma), size)


def test_standard_normal_at_mean():
    g = GaussianMixture2D.single([0, 0], 1.0)
    assert abs(log_prob(g, [0, 0]) - (-1.837877)) < 1e-6


def test_far_tail_matches_extended_precision():
    g = GaussianMixture2D.single([0, 0], 0.01)
    # |x - mu|^2 / (2 sigma^2) = 900: exp underflows relative to float range of the density ratio
    x = np.array([np.sqrt(900 * 2) * 0.01, 0.0])
    val = log_prob(g, x)
    ref = float(mp_log_prob(g, x))
    assert np.isfinite(val)
    assert abs(val - ref) <= 1e-6 * abs(ref)


def test_far_component_vanishes():
    g1 = GaussianMixture2D.single([0.3, 0.3], 0.02)
    g2 = GaussianMixture2D([0.5, 0.5], [[0.3, 0.3], [0.3 + 1000 * 0.02, 0.3]], [0.02, 0.02])
    v = log_prob(g2, [0.3, 0.3])
    # exact against the epsilon-aware closed form
    assert abs(v - np.log(0.5 / (2 * np.pi * 0.02**2) + LOG_EPS)) < 1e-12
    # and against log(1/2) + single component, up to the epsilon term's contribution
    assert abs(v - (np.log(0.5) + log_prob(g1, [0.3, 0.3]))) < 1e-11


@pytest.mark.parametrize("exponent", [800, 1e4, 1e8, 1e12])
def test_extreme_exponents_stay_finite(exponent):
    g = GaussianMixture2D([0.7, 0.3], [[0, 0], [0.1, 0]], [0.01, 0.02])
    x = np.array([np.sqrt(2 * exponent) * 0.01, 0.0])
    v = log_prob(g, x)
    assert np.isfinite(v)
    if exponent <= 1e4:
        assert abs(v - float(mp_log_prob(g, x))) <= 1e-6 * abs(v)


@given(st.integers(0, 10_000))
def test_matches_extended_precision_random(seed):
    rng = np.random.default_rng(seed)
    m = rng.integers(1, 5)
    w = rng.dirichlet(np.ones(m))
    g = GaussianMixture2D(w, rng.uniform(0, 1, size=(m, 2)), rng.uniform(0.005, 0.2, size=m))
    x = rng.uniform(-1, 2, size=2)
    v = log_prob(g, x)
    assert abs(v - float(mp_log_prob(g, x))) <= 1e-6 * max(1.0, abs(v))


def test_log_prob_grad_matches_finite_differences(rng):
    w = rng.dirichlet(np.ones(3))
    mu = rng.uniform(0, 1, size=(3, 2))
    sig = rng.uniform(0.05, 0.2, size=3)
    x = rng.uniform(0, 1, size=2)
    _, g = mixture_log_prob_grad(w, mu, sig, x)
    h = 1e-6
    fd = [(mixture_log_prob_grad(w, mu, sig, x + h * e)[0] -
           mixture_log_prob_grad(w, mu, sig, x - h * e)[0]) / (2 * h) for e in np.eye(2)]
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_density_integrates_to_one():
    g = GaussianMixture2D([0.6, 0.4], [[0.4, 0.5], [0.65, 0.35]], [0.05, 0.08])
    n = 400
    pts = HeatmapGrid(np.ones((n, n))).points()
    mass = np.exp(log_prob(g, pts)).sum() / n**2
    assert 0.98 <= mass <= 1.02


def test_heatmap_normalizes_and_rejects_empty():
    h = HeatmapGrid(np.full((3, 4), 2.0))
    assert np.isclose(h.probs.sum(), 1.0)
    with pytest.raises(EmptyHeatmap):
        HeatmapGrid(np.zeros((3, 3)))


def test_point_mass_fit():
    p = np.zeros((5, 5))
    p[2, 2] = 1.0
    g = fit_gmm(HeatmapGrid(p), EmConfig(n_components=1))
    assert np.allclose(g.means[0], [0.5, 0.5])
    assert g.sigmas[0] == EmConfig().sigma_floor
    h = HeatmapGrid(p)
    assert np.isclose(weighted_log_likelihood(h, g), log_prob(g, [0.5, 0.5]))


def test_sample_and_recover_single_gaussian():
    truth = np.array([0.47, 0.55])
    h = gaussian_grid(truth, 0.05, 64)
    g = fit_gmm(h, EmConfig(n_components=1))
    assert np.abs(g.means[0] - truth).max() < 1 / 64
    assert abs(g.sigmas[0] - 0.05) < 0.005


def test_two_blobs_recovered():
    centers = np.array([[0.3, 0.3], [0.7, 0.65]])
    truth = GaussianMixture2D([0.35, 0.65], centers, [0.04, 0.04])
    h = to_heatmap_grid(truth, 64)
    g = fit_gmm(h, EmConfig(n_components=2, max_iters=200)).sorted()
    order = [1, 0]  # sorted by weight: heavier blob first
    assert np.abs(g.means - centers[order]).max() < 1 / 64
    assert np.abs(g.weights - truth.weights[order]).max() < 0.05


def test_em_monotone_on_random_grids():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        grid = HeatmapGrid(rng.random((12, 12)) ** 4)
        cfg = EmConfig(n_components=int(rng.integers(1, 5)), max_iters=30, seed=seed)
        lls = [weighted_log_likelihood(grid, g) for g in em_iterations(grid, cfg)]
        assert np.all(np.diff(lls[1:]) >= -1e-9), seed


def test_uniform_grid_prefers_broad_mixture():
    h = HeatmapGrid(np.ones((20, 20)))
    tight = GaussianMixture2D.single([0.5, 0.5], 0.02)
    broad = GaussianMixture2D.single([0.5, 0.5], 0.3)
    assert weighted_log_likelihood(h, tight) < weighted_log_likelihood(h, broad)


def test_fit_is_deterministic():
    rng = np.random.default_rng(7)
    h = HeatmapGrid(rng.random((16, 16)))
    a = fit_gmm(h, EmConfig(seed=3))
    b = fit_gmm(h, EmConfig(seed=3))
    assert np.array_equal(a.means, b.means) and np.array_equal(a.sigmas, b.sigmas)


def test_fit_weights_and_floor():
    rng = np.random.default_rng(2)
    h = HeatmapGrid(rng.random((10, 10)))
    g = fit_gmm(h, EmConfig(n_components=4))
    assert abs(g.weights.sum() - 1) < 1e-9
    assert np.all(g.sigmas >= EmConfig().sigma_floor)


def test_large_sigma_grid_is_flat():
    h = to_heatmap_grid(GaussianMixture2D.single([0.5, 0.5], 10.0), 32)
    assert h.probs.max() / h.probs.min() < 1.5


def test_point_like_grid_argmax_at_mean():
    h = to_heatmap_grid(GaussianMixture2D.single([0.3125, 0.6875], 1e-3), 16)
    r, c = np.unravel_index(np.argmax(h.probs), h.probs.shape)
    assert (c, r) == (4, 10)


def test_heatmap_round_trip_within_a_cell():
    mean = np.array([0.41, 0.58])
    g = fit_gmm(gaussian_grid(mean, 0.03, 48), EmConfig(n_components=2))
    best = g.means[np.argmax(g.weights)]
    assert np.abs(best - mean).max() < 1 / 48


def test_mixture_set_matches_scalar_log_prob(rng):
    C, J, M = 2, 3, 2
    w = rng.dirichlet(np.ones(M), size=(C, J))
    ms = MixtureSet(w, rng.uniform(0, 1, (C, J, M, 2)), rng.uniform(0.05, 0.1, (C, J, M)))
    k = rng.uniform(0, 1, (C, J, 2))
    lp = ms.log_prob(k)
    for c in range(C):
        for j in range(J):
            assert np.isclose(lp[c, j], log_prob(ms.get(c, j), k[c, j]))
    nested = [[ms.get(c, j) for j in range(J)] for c in range(C)]
    assert np.array_equal(MixtureSet.from_nested(nested).means, ms.means)
