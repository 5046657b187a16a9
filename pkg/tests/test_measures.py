# tests/test_measures.py
import numpy as np
import pytest

from mixlab.errors import EmptyMeasure, MismatchedSupport, SampleOutOfBox
from mixlab.measures import (
    Box,
    EmpiricalMeasure,
    GridDensity,
    dual_lipschitz_distance,
    dual_lipschitz_estimate,
    histogram,
    sample_grid_density,
    tv_bootstrap_band,
    tv_distance,
    tv_null_band,
    tv_samples,
)

UNIT = Box([0.0], [1.0])


def _indicator(lo, hi):
    return lambda x: ((x[:, 0] >= lo) & (x[:, 0] <= hi)).astype(float)


def _random_density(rng, box, cells):
    return GridDensity(box, cells, rng.random(cells) + 1e-3).normalized()


# ---------------- total variation ---------------- #
def test_tv_identical_uniform_is_zero():
    a = GridDensity.uniform(UNIT, 50)
    assert tv_distance(a, GridDensity.uniform(UNIT, 50)) == 0.0


def test_tv_disjoint_supports_is_one():
    a = GridDensity.from_function(UNIT, 10, _indicator(0.0, 0.4))
    b = GridDensity.from_function(UNIT, 10, _indicator(0.6, 1.0))
    assert tv_distance(a, b) == pytest.approx(1.0, abs=1e-12)


def test_tv_shifted_uniforms_is_half():
    box = Box([0.0], [1.5])
    a = GridDensity.from_function(box, 300, _indicator(0.0, 1.0))
    b = GridDensity.from_function(box, 300, _indicator(0.5, 1.5))
    assert tv_distance(a, b) == pytest.approx(0.5, abs=1e-9)


def test_tv_rejects_mismatched_grids():
    with pytest.raises(MismatchedSupport):
        tv_distance(GridDensity.uniform(UNIT, 10), GridDensity.uniform(UNIT, 20))


def test_tv_rejects_mixed_kinds():
    emp = EmpiricalMeasure.from_points([[0.5]], UNIT)
    with pytest.raises(MismatchedSupport):
        tv_distance(GridDensity.uniform(UNIT, 10), emp)


def test_tv_metric_axioms_on_random_triples():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        a, b, c = (_random_density(rng, UNIT, 12) for _ in range(3))
        ab, bc, ac = tv_distance(a, b), tv_distance(b, c), tv_distance(a, c)
        assert ab == pytest.approx(tv_distance(b, a), abs=1e-12)
        assert 0.0 <= ab <= 1.0
        assert ac <= ab + bc + 1e-12


def test_tv_samples_of_one_cloud_is_zero():
    pts = np.random.default_rng(2).random((500, 1))
    assert tv_samples(pts, pts, UNIT, 20) == 0.0


def test_null_band_covers_same_law_statistic():
    rng = np.random.default_rng(3)
    a, b = rng.random((5000, 1)), rng.random((5000, 1))
    lo, hi = tv_null_band(a, b, UNIT, 20, np.random.default_rng(4))
    assert 0.0 <= lo <= hi < 0.1
    assert tv_samples(a, b, UNIT, 20) <= 2 * hi


def test_bootstrap_band_brackets_observed():
    rng = np.random.default_rng(5)
    ref = GridDensity.uniform(UNIT, 20)
    obs, lo, hi = tv_bootstrap_band(rng.random((2000, 1)), ref, np.random.default_rng(6))
    assert lo <= obs <= hi


# ---------------- dual-Lipschitz ---------------- #
def test_dual_lipschitz_identical_is_zero():
    mu = GridDensity.uniform(UNIT, 8)
    assert dual_lipschitz_distance(mu, mu) == 0.0


def test_dual_lipschitz_point_masses_at_distance_one():
    box = Box([-0.5], [1.5])
    d0 = EmpiricalMeasure.from_points([[0.0]], box)
    d1 = EmpiricalMeasure.from_points([[1.0]], box)
    assert dual_lipschitz_distance(d0, d1, box, 2) == pytest.approx(2.0 / 3.0, abs=1e-3)


def test_dual_lipschitz_point_masses_at_distance_tenth():
    box = Box([-0.05], [0.15])
    d0 = EmpiricalMeasure.from_points([[0.0]], box)
    d1 = EmpiricalMeasure.from_points([[0.1]], box)
    assert dual_lipschitz_distance(d0, d1, box, 2) == pytest.approx(0.2 / 2.1, abs=1e-3)


def test_dual_lipschitz_bounded_by_twice_tv():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        a, b = _random_density(rng, UNIT, 6), _random_density(rng, UNIT, 6)
        assert dual_lipschitz_distance(a, b) <= 2.0 * tv_distance(a, b) + 1e-9


def test_dual_lipschitz_metric_axioms():
    rng = np.random.default_rng(8)
    box = Box([0.0, 0.0], [1.0, 1.0])
    for _ in range(50):
        a, b, c = (_random_density(rng, box, (4, 4)) for _ in range(3))
        ab, bc, ac = dual_lipschitz_distance(a, b), dual_lipschitz_distance(b, c), dual_lipschitz_distance(a, c)
        assert ab == pytest.approx(dual_lipschitz_distance(b, a), abs=1e-7)
        assert ac <= ab + bc + 1e-7


def test_dual_lipschitz_high_dimension_uses_sampled_lower_bound():
    rng = np.random.default_rng(9)
    box = Box(np.zeros(3), np.ones(3))
    est = dual_lipschitz_estimate(_random_density(rng, box, (3, 3, 3)), _random_density(rng, box, (3, 3, 3)), seed=1)
    assert est.method == "sampled"
    assert 0.0 <= est.value <= 2.0


# ---------------- histograms and sampling ---------------- #
def test_histogram_of_single_point():
    mu = histogram(EmpiricalMeasure.from_points([[0.55]], UNIT), cells=10)
    assert np.count_nonzero(mu.values) == 1
    assert mu.values.max() == pytest.approx(1.0 / mu.cell_volume)


def test_histogram_of_uniform_samples():
    pts = np.random.default_rng(10).random((1_000_000, 1))
    probs = histogram(EmpiricalMeasure.from_points(pts, UNIT), cells=100).probabilities
    stderr = np.sqrt(0.01 * 0.99 / 1_000_000)
    assert np.all(np.abs(probs - 0.01) <= 5 * stderr)


def test_histogram_of_two_points():
    probs = histogram(EmpiricalMeasure.from_points([[0.1], [0.9]], UNIT), cells=4).probabilities
    assert sorted(probs[probs > 0].tolist()) == [0.5, 0.5]


def test_empirical_measure_checks_box_and_mass():
    with pytest.raises(EmptyMeasure):
        EmpiricalMeasure.from_points(np.empty((0, 1)), UNIT)
    with pytest.raises(SampleOutOfBox) as exc:
        EmpiricalMeasure.from_points([[0.5], [1.5]], UNIT)
    assert exc.value.index == 1


def test_sample_grid_density_reproduces_density():
    box = Box([0.0], [2.0])
    target = GridDensity.from_function(box, 20, lambda x: 1.0 - np.abs(x[:, 0] - 1.0))
    draws = sample_grid_density(target, 100_000, np.random.default_rng(11))
    assert np.all(box.contains(draws.points))
    assert tv_distance(histogram(draws, cells=20), target) < 0.02


def test_marginal_of_product_density():
    box = Box([0.0, 0.0], [1.0, 2.0])
    mu = GridDensity.from_function(box, (10, 20), lambda x: 2.0 * x[:, 0])
    first = mu.marginal([0])
    assert first.mass == pytest.approx(1.0)
    assert np.allclose(first.values, 2.0 * first.centers()[:, 0], rtol=1e-9)


def test_grid_density_binary_layout():
    mu = GridDensity.from_function(Box([0.0, -1.0], [1.0, 1.0]), (3, 4), lambda x: 1.0 + x[:, 0] ** 2)
    back = GridDensity.from_bytes(mu.to_bytes())
    assert back.cells == (3, 4)
    assert back.box.same_as(mu.box)
    assert np.array_equal(back.values, mu.values)
