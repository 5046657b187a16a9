# tests/test_mixing.py
import numpy as np
import pandas as pd
import pytest

from mixlab import catalog
from mixlab.errors import BudgetExceeded, CertificateContradicted, EmptyMinorization, TooFewPoints
from mixlab.markov_noise import transition_matrix
from mixlab.mixing import (
    DecayCurve,
    certify_coupling,
    certify_recurrence,
    decay_curve,
    estimate_stationary,
    extended_ball_points,
    fit_rate,
    minorizing_measure,
    verify_minorization,
)
from mixlab.reduction import ExtendedState, extended_transfer_matrix
from utils.reporting import emit_plotdata

ORIGIN = ExtendedState([0.0], [0.0])


# ---------------- rate fits ---------------- #
def test_fit_recovers_exact_exponential():
    k = np.arange(11)
    fit = fit_rate(DecayCurve.synthetic(2.0 * np.exp(-0.5 * k), 1e-6))
    assert fit.C_fit == pytest.approx(2.0, rel=1e-9)
    assert fit.gamma_fit == pytest.approx(0.5, rel=1e-9)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-9)
    assert fit.k_range_used == (0, 10)


def test_fit_stops_at_the_noise_floor():
    k = np.arange(31)
    floor = 1e-3
    fit = fit_rate(DecayCurve.synthetic(np.maximum(2.0 * np.exp(-0.5 * k), floor), floor))
    assert fit.k_range_used == (0, 10)
    assert fit.gamma_fit == pytest.approx(0.5, rel=0.05)


def test_ceiling_drops_saturated_points():
    k = np.arange(11)
    fit = fit_rate(DecayCurve.synthetic(2.0 * np.exp(-0.5 * k), 1e-6), ceiling=0.8)
    assert fit.k_range_used == (2, 10)
    assert fit.gamma_fit == pytest.approx(0.5, rel=1e-9)
    assert fit.C_fit == pytest.approx(2.0, rel=1e-9)


def test_saturated_curve_has_too_few_points():
    with pytest.raises(TooFewPoints):
        fit_rate(DecayCurve.synthetic(np.r_[np.ones(8), 0.5, 0.3, 0.2], 1e-6), ceiling=0.8)


def test_flat_curve_has_too_few_points():
    with pytest.raises(TooFewPoints):
        fit_rate(DecayCurve.synthetic(np.full(20, 1e-3), 1e-3))


def test_decay_curve_rejects_bad_values():
    with pytest.raises(ValueError):
        DecayCurve.synthetic([0.5, -0.1], 1e-3)
    with pytest.raises(ValueError):
        DecayCurve.synthetic([0.5, 0.1], 0.0)


def test_fit_as_dict():
    fit = fit_rate(DecayCurve.synthetic(np.exp(-np.arange(6.0)), 1e-6))
    assert set(fit.to_dict()) == {"C_fit", "gamma_fit", "r_squared", "k_min", "k_max"}


# ---------------- plot data ---------------- #
def test_plotdata_of_empty_curve(tmp_path):
    out = emit_plotdata(DecayCurve.synthetic([], 1e-3), None, tmp_path / "decay.csv")
    for path in out["files"].values():
        assert len(path.read_text().splitlines()) == 1
    assert out["max_abs_residual"] == 0.0


def test_plotdata_of_exact_fit(tmp_path):
    curve = DecayCurve.synthetic(2.0 * np.exp(-0.5 * np.arange(8)), 1e-6)
    out = emit_plotdata(curve, fit_rate(curve), tmp_path / "decay.csv")
    tv = pd.read_csv(out["files"]["tv"])
    fitted = pd.read_csv(out["files"]["fit"])
    assert list(tv.columns) == ["k", "tv"]
    assert np.allclose(fitted["fitted"], tv["tv"], atol=1e-9)
    assert out["max_abs_residual"] < 1e-9
    assert b"\r\n" not in out["files"]["residual"].read_bytes()


def test_plotdata_without_fit(tmp_path):
    curve = DecayCurve.synthetic([1.0, 0.5], 1e-3)
    out = emit_plotdata(curve, None, tmp_path / "decay.csv")
    assert pd.read_csv(out["files"]["fit"])["fitted"].isna().all()


# ---------------- ball points ---------------- #
def test_extended_ball_points_use_the_max_norm(linear_1d):
    pts = extended_ball_points(linear_1d, 0.3, 100, seed=1)
    assert pts.shape == (100, 2)
    assert np.all(np.abs(pts) <= 0.3)
    assert np.array_equal(pts, extended_ball_points(linear_1d, 0.3, 100, seed=1))


# ---------------- certificates ---------------- #
def test_recurrence_of_pure_noise(pure_noise, iid):
    report = certify_recurrence(pure_noise, iid, ORIGIN, 0.5, budget_m=50, N=2000, seed=3)
    assert report.contraction_steps == 1
    assert report.reach_steps == 1
    assert report.m_steps == 2
    assert report.delta == pytest.approx(0.45, abs=1e-6)
    assert report.p_bound == pytest.approx(0.45 ** 2, abs=1e-4)
    assert report.mc_frequency >= report.p_bound


def test_recurrence_of_kicked_linear(linear_1d, ar1):
    report = certify_recurrence(linear_1d, ar1, ORIGIN, 0.5, budget_m=50, N=2000, seed=4)
    assert report.contraction_steps == 3
    assert 0.0 < report.p_bound < 1.0
    assert report.m_steps == report.reach_steps + report.contraction_steps


def test_recurrence_needs_the_origin(pure_noise, iid):
    with pytest.raises(ValueError):
        certify_recurrence(pure_noise, iid, ExtendedState([0.1], [0.0]), 0.5, 50, 100, seed=0)


def test_drifting_noise_has_no_recurrence_or_minorant(pure_noise, drift):
    with pytest.raises(BudgetExceeded):
        certify_recurrence(pure_noise, drift, ORIGIN, 0.5, budget_m=50, N=500, seed=5)
    with pytest.raises(EmptyMinorization):
        minorizing_measure(pure_noise, drift, 0.45)


def test_minorizing_measure_of_pure_noise(pure_noise, iid):
    measure = minorizing_measure(pure_noise, iid, 0.45)
    assert measure.state_free
    assert measure.gamma == pytest.approx(0.5)
    assert measure.mass == pytest.approx(1.0)
    points = extended_ball_points(pure_noise, 0.45, 3, seed=6)
    check = verify_minorization(pure_noise, iid, measure, points, n=2000, seed=6)
    assert check.passed
    assert check.margins.shape == (3,)


def test_coupling_of_pure_noise(pure_noise, iid):
    cert = certify_coupling(pure_noise, iid, 1.0, 2, 0.45, N=2000, seed=7, pairs=5)
    assert cert.method == "grid"
    assert cert.passed
    assert cert.worst_pair_tv == pytest.approx(0.0, abs=1e-12)


def test_coupling_by_monte_carlo(pure_noise, iid):
    cert = certify_coupling(pure_noise, iid, 0.9, 2, 0.45, N=2000, seed=8, pairs=3, method="mc")
    assert cert.method == "mc"
    assert cert.pair_tvs.shape == (3,)
    assert cert.passed


# ---------------- stationary law and decay ---------------- #
def test_stationary_estimate_of_pure_noise(pure_noise, iid):
    mus = estimate_stationary(pure_noise, iid, burn_in=5, N=4000, segment_m=1, seed=9, state_cells=20,
                              segment_cells=8, pilot_n=500, pilot_horizon=10)
    assert len(mus) == 2
    assert mus[0].cells == (20,)
    assert mus[1].box.dim == 2
    assert mus[0].diagnostics["samples"] == 4000
    assert np.all(np.abs(mus[0].values - 0.5) < 0.15)


def test_segment_marginals_match_the_state_law(linear_1d, ar1):
    mu0, mu1 = estimate_stationary(linear_1d, ar1, burn_in=100, N=20_000, segment_m=1, seed=13, state_cells=20,
                                   segment_cells=20, pilot_n=500, pilot_horizon=20)
    widths = mu1.box.widths / np.asarray(mu1.cells)
    first = mu1.values.sum(axis=1) * widths[1]
    second = mu1.values.sum(axis=0) * widths[0]
    assert np.allclose(first, mu0.values, atol=1e-9)
    assert 0.5 * np.abs(second - mu0.values).sum() * mu0.cell_volume < 0.05


def test_two_step_transfer_contracts_total_variation(linear_1d, ar1):
    M = extended_transfer_matrix(linear_1d, ar1, 24, 24)
    assert np.allclose(np.asarray(M.sum(axis=1)).ravel(), 1.0, atol=1e-9)
    P2 = (M @ M).toarray()
    rng = np.random.default_rng(12)
    for _ in range(20):
        p, q = rng.dirichlet(np.ones(P2.shape[0]), size=2)
        tvs = []
        for _ in range(4):
            tvs.append(0.5 * np.abs(p - q).sum())
            p, q = p @ P2, q @ P2
        assert all(b <= a + 1e-12 for a, b in zip(tvs, tvs[1:]))


# ---------------- decay experiment and certificates ---------------- #
def test_grid_decay_respects_the_certified_rate(pure_noise, ar1):
    measure = minorizing_measure(pure_noise, ar1, 0.5)
    rec = certify_recurrence(pure_noise, ar1, ORIGIN, measure.delta, budget_m=50, N=2000, seed=14)
    block = 2 + rec.m_steps
    P = transition_matrix(ar1, 64)
    pi = np.full(64, 1.0 / 64)
    for _ in range(500):
        pi = pi @ P
    p = np.zeros(64)
    p[-1] = 1.0
    for k in range(40):
        tv = 0.5 * np.abs(p - pi).sum()
        assert tv <= (1.0 - measure.mass) ** (k // block) * 1.05
        p = p @ P


def test_huge_ball_on_drifting_noise_fails_the_coupling(pure_noise, drift):
    with pytest.raises(CertificateContradicted):
        certify_coupling(pure_noise, drift, 0.5, 2, 100.0, N=2000, seed=15, pairs=10)


def test_delta_search_stays_in_range(pure_noise, ar1):
    searched = minorizing_measure(pure_noise, ar1, 0.5)
    fixed = minorizing_measure(pure_noise, ar1, 0.5, search=False)
    assert fixed.delta == 0.5
    assert 0.25 <= searched.delta <= 0.5
    assert searched.density.diagnostics["delta"] == searched.delta
    assert searched.mass >= 0.95 * fixed.mass


@pytest.mark.slow
def test_decay_rate_is_stable_across_seeds(linear_1d):
    noise = catalog.ar1_truncgauss(a=0.7, s=0.3)
    gammas = []
    for seed in (2024, 2025, 2026):
        mu = estimate_stationary(linear_1d, noise, burn_in=500, N=100_000, segment_m=0, seed=seed,
                                 state_cells=256)[0]
        curve = decay_curve(linear_1d, noise, linear_1d.invariant_set.hi, mu, horizon=30, N=100_000, seed=seed,
                            n_boot=20, xi0=noise.noise_support.hi)
        assert curve.tv_values[0] > curve.tv_values[3] > curve.tv_values[6]
        fit = fit_rate(curve, ceiling=0.8)
        lo, hi = fit.k_range_used
        assert hi - lo + 1 >= 4
        assert fit.gamma_fit > 0.3
        assert fit.r_squared >= 0.95
        gammas.append(fit.gamma_fit)
    assert np.ptp(gammas) <= 0.2 * np.mean(gammas)


@pytest.mark.slow
def test_kicked_linear_certificates_with_ar1_noise(linear_1d, ar1):
    measure = minorizing_measure(linear_1d, ar1, 0.5, seed=16)
    assert not measure.state_free
    assert measure.mass > 0.01
    assert 0.25 <= measure.delta <= 0.5
    points = extended_ball_points(linear_1d, measure.delta, 20, seed=16)
    check = verify_minorization(linear_1d, ar1, measure, points, n=20_000, seed=16)
    assert check.passed
    cert = certify_coupling(linear_1d, ar1, measure.mass, 2, measure.delta, N=20_000, seed=16, pairs=50)
    assert cert.passed
    assert cert.pair_tvs.shape == (50,)
