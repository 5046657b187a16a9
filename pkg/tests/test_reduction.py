# tests/test_reduction.py
import numpy as np
import pytest

import mixlab.reduction as reduction
from mixlab import catalog
from mixlab.dynamics import RdsSystem
from mixlab.errors import MismatchedBuffers
from mixlab.measures import Box, tv_distance
from mixlab.reduction import (
    ExtendedState,
    PastBuffer,
    StationaryNoiseModel,
    check_recurrence_to_zero,
    check_vec_surjectivity,
    conditional_m_step,
    extended_kernel,
    extended_map,
    extended_state_marginal,
    extended_transfer_matrix,
    law_equality_test,
    markov_property_test,
    past_metric,
    simulate_ensemble,
    simulate_extended,
    stationary_buffers,
    truncation_bound,
    validate_noise_model,
)

E1 = np.exp(-1.0)


# ---------------- past buffers ---------------- #
def test_past_metric_weights_older_entries_less():
    zero = PastBuffer([0.0, 0.0, 0.0])
    assert past_metric(PastBuffer([0.0, 0.0, 1.0]), zero) == pytest.approx(1.0)
    assert past_metric(PastBuffer([0.0, 1.0, 0.0]), zero) == pytest.approx(0.5)
    assert past_metric(PastBuffer([1.0, 0.0, 0.0]), zero) == pytest.approx(0.25)
    assert past_metric(zero, zero) == 0.0


def test_past_metric_rejects_mismatched_buffers():
    with pytest.raises(MismatchedBuffers):
        past_metric(PastBuffer([0.0, 0.0]), PastBuffer([0.0, 0.0, 0.0]))
    with pytest.raises(MismatchedBuffers):
        past_metric(PastBuffer([0.0, 0.0], iota=2.0), PastBuffer([0.0, 0.0], iota=3.0))


def test_push_drops_oldest():
    b = PastBuffer([1.0, 2.0, 3.0]).push(4.0)
    assert b.entries[:, 0].tolist() == [2.0, 3.0, 4.0]
    assert b.latest.tolist() == [4.0]
    assert b.memory_m == 3


def test_past_buffer_binary_layout():
    b = PastBuffer(np.arange(6.0).reshape(3, 2), iota=3.0)
    back = PastBuffer.from_bytes(b.to_bytes())
    assert back.iota == 3.0
    assert np.array_equal(back.entries, b.entries)


def test_past_buffer_needs_iota_above_one():
    with pytest.raises(ValueError):
        PastBuffer([0.0], iota=1.0)


def test_truncation_bound_shrinks_with_memory():
    assert truncation_bound(2.0, 1, 2.0) == pytest.approx(2.0)
    assert truncation_bound(2.0, 16, 2.0) < 1e-4


# ---------------- extended dynamics ---------------- #
def test_extended_map_of_pure_noise(pure_noise):
    U = extended_map(pure_noise, ExtendedState([0.3], [0.1]), [0.7])
    assert U.state_v.tolist() == [0.7]
    assert U.noise_xi.tolist() == [0.7]


def test_extended_map_of_kicked_linear(linear_1d):
    U = extended_map(linear_1d, ExtendedState([1.0], [0.5]), [0.2])
    assert U.state_v[0] == pytest.approx(E1 + 0.2, abs=1e-6)
    assert U.noise_xi.tolist() == [0.2]

    W = extended_map(linear_1d, ExtendedState([1.0], PastBuffer([0.1, 0.5])), [0.2])
    assert W.is_stationary
    assert W.noise_xi.entries[:, 0].tolist() == [0.5, 0.2]


def test_extended_kernel_of_pure_noise_is_diagonal(pure_noise, iid):
    joint = extended_kernel(pure_noise, iid, ExtendedState([0.3], [0.1]), state_cells=32, noise_cells=32)
    probs = joint.probabilities
    assert probs.shape == (32, 32)
    assert np.allclose(probs, np.eye(32) / 32.0)


def test_extended_transfer_matrix_is_stochastic(pure_noise, ar1):
    M = extended_transfer_matrix(pure_noise, ar1, state_cells=8, noise_cells=8)
    assert M.shape == (64, 64)
    assert np.allclose(np.asarray(M.sum(axis=1)).ravel(), 1.0)


def test_state_marginal_agrees_with_splatting(linear_1d, iid):
    U = ExtendedState([0.0], [0.0])
    by_pushforward = extended_state_marginal(linear_1d, iid, U, state_cells=64)
    by_splatting = extended_kernel(linear_1d, iid, U, state_cells=64, noise_cells=64).marginal([0])
    assert tv_distance(by_pushforward, by_splatting) < 0.05


# ---------------- simulation ---------------- #
def test_simulate_extended_of_pure_noise(pure_noise, ar1):
    path = simulate_extended(pure_noise, ar1, ExtendedState([0.0], [0.0]), 10, seed=1)
    assert len(path) == 10
    for U in path:
        assert U.state_v.tolist() == U.noise_xi.tolist()


def test_markov_kernel_and_memory_three_model_agree(linear_1d, iid):
    n, horizon = 200, 5
    markov = simulate_ensemble(linear_1d, iid, [0.5], n, horizon, seed=7, xi0=np.zeros((n, 1, 1)))
    wide = StationaryNoiseModel.from_kernel(iid, memory_m=3)
    stationary = simulate_ensemble(linear_1d, wide, [0.5], n, horizon, seed=7, xi0=np.zeros((n, 3, 1)))
    assert np.array_equal(markov.states, stationary.states)
    assert stationary.buffers.shape == (n, 3, 1)


def test_ensemble_does_not_depend_on_threads(linear_1d, ar1):
    one = simulate_ensemble(linear_1d, ar1, [1.0], 300, 4, seed=11, threads=1, block_size=64)
    many = simulate_ensemble(linear_1d, ar1, [1.0], 300, 4, seed=11, threads=3, block_size=64)
    assert np.array_equal(one.states, many.states)
    assert np.array_equal(one.noises, many.noises)


def test_ensemble_without_path_keeps_ends(linear_1d, ar1):
    full = simulate_ensemble(linear_1d, ar1, [1.0], 50, 6, seed=2)
    ends = simulate_ensemble(linear_1d, ar1, [1.0], 50, 6, seed=2, keep_path=False)
    assert ends.states.shape == (50, 2, 1)
    assert np.array_equal(ends.states[:, -1], full.states[:, -1])


def test_stationary_buffers_shapes(ar1):
    bufs = stationary_buffers(StationaryNoiseModel.from_kernel(ar1, memory_m=3), 100, seed=3)
    assert bufs.shape == (100, 3, 1)
    assert np.all(np.abs(bufs) <= 1.0)


# ---------------- law equality ---------------- #
def test_law_equality_for_iid_noise(pure_noise, iid):
    report = law_equality_test(pure_noise, iid, [0.0], horizon_k=2, ensemble_n=10_000, seed=1, cells=10)
    assert [r.k for r in report.rows] == [1, 2]
    assert report.passed, report.to_frame()
    assert list(report.to_frame().columns) == ["k", "tv", "band_lo", "band_hi", "verdict"]


def test_law_equality_for_ar1_noise(pure_noise, ar1):
    report = law_equality_test(pure_noise, ar1, [0.0], horizon_k=2, ensemble_n=10_000, seed=2, cells=10)
    assert report.passed, report.to_frame()


@pytest.mark.slow
def test_law_equality_on_the_kicked_system(linear_1d, ar1):
    report = law_equality_test(linear_1d, ar1, [0.5], horizon_k=2, ensemble_n=100_000, seed=4, cells=40)
    assert report.passed, report.to_frame()


def test_law_equality_detects_a_broken_buffer_shift(pure_noise, monkeypatch):
    kernel = catalog.ar1_truncgauss(a=0.8, s=0.3)
    shift = reduction._shift_buffers
    monkeypatch.setattr(reduction, "_shift_buffers", lambda buffers, eta: shift(buffers, -eta))
    report = law_equality_test(pure_noise, kernel, [0.0], horizon_k=2, ensemble_n=10_000, seed=3, cells=10)
    assert not report.passed
    assert report.rows[-1].tv > 3 * report.rows[-1].band_hi


def test_law_equality_horizon_range(pure_noise, iid):
    with pytest.raises(ValueError):
        law_equality_test(pure_noise, iid, [0.0], horizon_k=4, ensemble_n=10, seed=0)


# ---------------- conditional laws and recurrence ---------------- #
def test_conditional_m_step_of_iid(iid):
    model = StationaryNoiseModel.from_kernel(iid, memory_m=2)
    joint = conditional_m_step(model, PastBuffer([0.2, -0.4]), 2, cells=16)
    assert joint.box.dim == 2
    assert joint.mass == pytest.approx(1.0)
    assert np.allclose(joint.values, 0.25)


def test_conditional_m_step_checks_buffer(iid):
    model = StationaryNoiseModel.from_kernel(iid, memory_m=2)
    with pytest.raises(MismatchedBuffers):
        conditional_m_step(model, PastBuffer([0.0, 0.0, 0.0]), 1, cells=16)


def test_recurrence_to_zero_of_iid(iid):
    s, bound = check_recurrence_to_zero(iid, 1, 0.1, budget_s=3)
    assert s == 1
    assert bound == pytest.approx(0.1, abs=1e-9)
    s2, bound2 = check_recurrence_to_zero(iid, 2, 0.1, budget_s=3)
    assert s2 == 1
    assert bound2 == pytest.approx(0.01, abs=1e-9)


def test_validate_second_order_model():
    model = catalog.ar2_truncgauss(memory_m=4)
    check = validate_noise_model(model)
    assert check.passed, check


def test_vec_surjectivity_of_kicked_linear(linear_1d):
    assert check_vec_surjectivity(linear_1d, 1) == pytest.approx(1.0)
    assert check_vec_surjectivity(linear_1d, 2) == pytest.approx(0.832837, abs=1e-4)


def test_vec_surjectivity_of_noise_independent_map():
    deaf = RdsSystem(
        name="deaf",
        dim_state=1,
        dim_noise=1,
        map=lambda u, eta: E1 * u,
        d_state=lambda u, eta: np.full(np.shape(u)[:-1] + (1, 1), E1),
        d_noise=lambda u, eta: np.zeros(np.shape(u)[:-1] + (1, 1)),
        invariant_set=Box.cube(1.0, 1),
        noise_support=Box.cube(1.0, 1),
    )
    assert check_vec_surjectivity(deaf, 2) == 0.0


def test_markov_property_of_reduced_chain(linear_1d, ar1):
    report = markov_property_test(linear_1d, ar1, 20_000, seed=5)
    assert report.level == 1e-2
    assert report.passed, report
    assert report.dof > 0
