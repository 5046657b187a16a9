# tests/test_markov_noise.py
import numpy as np
import pytest
from scipy.stats import kstest, truncnorm

from mixlab.errors import BudgetExceeded, DegenerateDensity, MinorizationFails, ResolutionTooCoarse
from mixlab.markov_noise import (
    MarkovKernel,
    check_minorization,
    check_strong_recurrence,
    density_rows,
    k_step_kernel,
    propagate,
    sample,
    sample_chain,
    stationary_noise_density,
    step_error_bound,
    transition_matrix,
    validate_kernel,
)
from mixlab.measures import Box, cell_volume, tv_distance

K = Box.cube(1.0, 1)


def _const_kernel(fn, name="custom", L=0.0, cells=64):
    def density(y, z):
        return np.broadcast_to(fn(np.asarray(z)[..., 0]), np.broadcast_shapes(np.shape(y)[:-1], np.shape(z)[:-1]))
    return MarkovKernel(name, K, density, L, sampler_cells=cells)


# ---------------- sampling ---------------- #
def test_uniform_kernel_samples_are_uniform(iid):
    z = sample(iid, np.zeros((5000, 1)), np.random.default_rng(0))
    assert z.shape == (5000, 1)
    assert kstest((z[:, 0] + 1.0) / 2.0, "uniform").pvalue > 1e-3


def test_single_point_gives_single_draw(iid):
    z = sample(iid, np.zeros(1), np.random.default_rng(1))
    assert z.shape == (1,)
    assert K.contains(z).all()


def test_narrow_density_stays_in_its_cell():
    w = 2.0 / 64
    c = -1.0 + 40.5 * w
    spike = _const_kernel(lambda z: (np.abs(z - c) < 0.5 * w) / w)
    z = sample(spike, np.zeros((1000, 1)), np.random.default_rng(2))
    assert np.all((z >= c - 0.5 * w - 1e-12) & (z <= c + 0.5 * w + 1e-12))


def test_ar1_conditional_mean(ar1):
    n = 20_000
    z = sample(ar1, np.full((n, 1), 0.8), np.random.default_rng(3))[:, 0]
    law = truncnorm((-1.0 - 0.4) / 0.3, (1.0 - 0.4) / 0.3, loc=0.4, scale=0.3)
    assert abs(z.mean() - law.mean()) <= 4 * law.std() / np.sqrt(n) + 1e-3


def test_sample_chain_shape_and_support(ar1):
    paths = sample_chain(ar1, np.zeros((10, 1)), 7, np.random.default_rng(4))
    assert paths.shape == (10, 7, 1)
    assert K.contains(paths.reshape(-1, 1)).all()


# ---------------- k-step kernels ---------------- #
def test_one_step_kernel_is_normalized_row(ar1):
    q1 = k_step_kernel(ar1, [0.3], 1)
    rows = density_rows(ar1, [[0.3]])[0]
    vol = cell_volume(K, ar1.sampler_cells)
    assert np.allclose(q1.probabilities.ravel(), rows * vol / (rows.sum() * vol), atol=1e-12)
    assert q1.diagnostics["quadrature_bound"] == pytest.approx(step_error_bound(ar1))


def test_iid_k_step_equals_one_step(iid):
    q1 = k_step_kernel(iid, [0.5], 1)
    q4 = k_step_kernel(iid, [0.5], 4)
    assert np.allclose(q1.values, q4.values, atol=1e-12)
    assert q4.diagnostics["quadrature_bound"] == 0.0


def test_k_step_matches_chain_histogram(ar1):
    q5 = k_step_kernel(ar1, [0.3], 5)
    chains = sample_chain(ar1, np.full((20_000, 1), 0.3), 5, np.random.default_rng(5))[:, -1, 0]
    coarse = q5.probabilities.reshape(32, -1).sum(axis=1)
    counts = np.histogram(chains, bins=32, range=(-1.0, 1.0))[0] / chains.size
    assert 0.5 * np.abs(coarse - counts).sum() <= 0.04 + 5 * step_error_bound(ar1)


def test_k_step_refuses_coarse_grid(ar1):
    with pytest.raises(ResolutionTooCoarse):
        k_step_kernel(ar1, [0.0], 5, cells=8)
    with pytest.raises(ValueError):
        k_step_kernel(ar1, [0.0], 0)


def test_propagate_and_stationary_density(ar1):
    pi = stationary_noise_density(ar1)
    assert pi.mass == pytest.approx(1.0)
    moved = propagate(ar1, pi, 3)
    assert tv_distance(moved, pi) < 1e-9
    assert moved.diagnostics["quadrature_bound"] == pytest.approx(3 * step_error_bound(ar1))


def test_transition_matrix_is_stochastic(ar1):
    P = transition_matrix(ar1, 32)
    assert np.allclose(P.sum(axis=1), 1.0)
    assert np.all(P >= 0)


def test_zero_density_is_degenerate():
    dead = _const_kernel(lambda z: 0.0 * z, name="dead")
    with pytest.raises(DegenerateDensity):
        transition_matrix(dead)


# ---------------- validation and certificates ---------------- #
def test_validate_catalog_kernels(iid, ar1):
    for kernel in (iid, ar1):
        check = validate_kernel(kernel)
        assert check.passed, check
        assert check.min_density > 0


def test_minorization_of_uniform(iid):
    cert = check_minorization(iid, 0.5)
    assert cert.lower_density_at_zero == pytest.approx(0.5)
    assert cert.minorizing_mass == pytest.approx(1.0)
    assert cert.slack == 0.0


def test_minorization_of_ar1(ar1):
    cert = check_minorization(ar1, 0.2)
    assert cert.lower_density_at_zero > 0
    assert 0 < cert.minorizing_mass <= 1
    assert cert.point_count > 0


def test_minorization_fails_when_zero_is_avoided(drift):
    hole = _const_kernel(lambda z: (np.abs(z) >= 0.2) / 1.6, name="hole")
    with pytest.raises(MinorizationFails):
        check_minorization(hole, 0.5)
    with pytest.raises(MinorizationFails):
        check_minorization(drift, 0.5)


def test_strong_recurrence_of_uniform(iid):
    cert = check_strong_recurrence(iid, 0.1, budget_l=5)
    assert cert.steps_l == 1
    assert cert.kappa == pytest.approx(0.1, abs=1e-9)


def test_strong_recurrence_of_ar1(ar1):
    cert = check_strong_recurrence(ar1, 0.1, budget_l=5)
    assert cert.steps_l == 1
    assert cert.kappa > 0


def test_drifting_chain_never_returns(drift):
    with pytest.raises(BudgetExceeded):
        check_strong_recurrence(drift, 0.1, budget_l=3)
