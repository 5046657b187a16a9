# tests/test_dynamics.py
import numpy as np
import pytest
from scipy.integrate import solve_ivp

from mixlab import catalog
from mixlab.dynamics import (
    KickedOde,
    RdsSystem,
    absorption_time,
    check_controllability,
    check_dissipativity,
    flow_map,
    flow_map_with_jacobian,
    iterate,
    iterate_zero_noise,
    make_kicked_system,
    step,
    validate_system,
)
from mixlab.errors import BudgetExceeded, LeftInvariantSet, NotDissipative
from mixlab.measures import Box
from utils.sample_points import corners

E1 = np.exp(-1.0)


def _cubic_ode(steps=100):
    return KickedOde(lambda x: -x ** 3, lambda x: (-3.0 * x ** 2)[..., None], 1.0, 0.25,
                     Box.cube(5.0, 1), rk4_steps=steps, name="cubic")


# ---------------- steps and trajectories ---------------- #
def test_step_of_kicked_linear(linear_1d):
    for x, eta in [(1.0, 0.0), (-2.0, 0.5), (0.3, -1.0)]:
        assert step(linear_1d, [x], [eta])[0] == pytest.approx(E1 * x + eta, abs=1e-6)


def test_iterate_with_empty_noise(linear_1d):
    assert iterate(linear_1d, [1.0], []) == []


def test_iterate_with_zero_noise_decays(linear_1d):
    path = iterate(linear_1d, [1.0], [[0.0]] * 5)
    assert len(path) == 5
    for k, u in enumerate(path, start=1):
        assert u[0] == pytest.approx(np.exp(-k), abs=1e-5)
    assert iterate_zero_noise(linear_1d, np.array([[1.0]]), 5)[0, 0] == pytest.approx(np.exp(-5), abs=1e-5)


def test_pure_noise_forgets_state(pure_noise):
    path = iterate(pure_noise, [0.9], [[0.1], [-0.4], [0.7]])
    assert [u[0] for u in path] == [0.1, -0.4, 0.7]


def test_step_leaving_invariant_set_is_reported(make_affine):
    sys = make_affine(1.0, half_x=1.0)
    with pytest.raises(LeftInvariantSet):
        step(sys, [0.9], [0.5])
    with pytest.raises(ValueError):
        step(sys, [1.5], [0.0])
    with pytest.raises(ValueError):
        step(sys, [0.0], [2.0])


# ---------------- kicked ODE flow ---------------- #
def test_flow_of_linear_field():
    ode = KickedOde(lambda x: -x, lambda x: np.broadcast_to(-np.eye(1), x.shape + (1,)).copy(), 1.0, 0.0,
                    Box.cube(10.0, 1))
    assert flow_map(ode, np.array([1.0]))[0] == pytest.approx(E1, abs=1e-6)
    assert flow_map(ode, np.array([0.0]))[0] == 0.0


def test_flow_of_cubic_field_matches_closed_form():
    ode = _cubic_ode()
    assert flow_map(ode, np.array([2.0]))[0] == pytest.approx(2.0 / 3.0, abs=1e-5)
    x, jac = flow_map_with_jacobian(ode, np.array([1.0]))
    assert x[0] == pytest.approx(1.0 / np.sqrt(3.0), abs=1e-6)
    assert jac[0, 0] == pytest.approx(3.0 ** -1.5, abs=1e-6)


def test_flow_of_cubic_field_matches_reference_solver():
    ode = _cubic_ode()
    for x0 in (-1.5, -0.7, 0.2, 1.2):
        ref = solve_ivp(lambda t, x: -x ** 3, (0.0, 1.0), [x0], rtol=1e-11, atol=1e-12).y[0, -1]
        assert flow_map(ode, np.array([x0]))[0] == pytest.approx(ref, abs=1e-5)


def test_rk4_error_is_fourth_order():
    exact = 1.0 / np.sqrt(3.0)
    coarse = abs(flow_map(_cubic_ode(), np.array([1.0]), steps=20)[0] - exact)
    fine = abs(flow_map(_cubic_ode(), np.array([1.0]), steps=40)[0] - exact)
    assert 12.0 <= coarse / fine <= 20.0


def test_flow_rejects_points_outside_bounding_box():
    with pytest.raises(ValueError):
        flow_map(_cubic_ode(), np.array([6.0]))


# ---------------- kicked systems ---------------- #
def test_expanding_field_is_not_dissipative():
    ode = KickedOde(lambda x: x, lambda x: np.broadcast_to(np.eye(1), x.shape + (1,)).copy(), 1.0, 0.0,
                    Box.cube(5.0, 1), name="expanding")
    with pytest.raises(NotDissipative):
        make_kicked_system(ode, Box.cube(1.0, 1), n_radii=2000)


def test_kicked_linear_invariant_radius(linear_1d):
    info = linear_1d.info
    assert info["beta"] == pytest.approx(E1, abs=1e-6)
    assert info["C1"] < 1e-6
    assert info["R"] == pytest.approx(2.0 * (info["kappa"] + info["C1"]) / (1.0 - info["beta"]))
    assert linear_1d.invariant_set.hi[0] == pytest.approx(info["R"])


@pytest.mark.parametrize("name", ["kicked_linear_1d", "kicked_linear_2d"])
def test_corners_of_the_invariant_cube_stay_inside(name):
    sys = catalog.SYSTEMS[name]()
    X, K = sys.invariant_set, sys.noise_support
    u, eta = corners(X.lo, X.hi), corners(K.lo, K.hi)
    pairs_u = np.repeat(u, eta.shape[0], axis=0)
    pairs_eta = np.tile(eta, (u.shape[0], 1))
    assert np.all(X.contains(sys(pairs_u, pairs_eta)))
    # the cube is the max-norm ball of radius R
    assert np.allclose(X.hi, sys.info["R"]) and np.allclose(X.lo, -sys.info["R"])


def test_absorption_from_far_outside(linear_1d):
    assert absorption_time(linear_1d, np.array([100.0])) == 5
    assert absorption_time(linear_1d, np.array([0.0])) == 0


def test_absorption_budget(linear_1d):
    with pytest.raises(BudgetExceeded):
        absorption_time(linear_1d, np.array([100.0]), budget=2)


# ---------------- hypothesis checks ---------------- #
def test_dissipativity_steps(make_affine, pure_noise):
    sys = make_affine(E1, half_x=3.2)
    assert check_dissipativity(sys, eps=0.1) == 4
    assert check_dissipativity(sys, eps=10.0) == 0
    assert check_dissipativity(pure_noise, eps=0.1) == 1


def test_dissipativity_budget(make_affine):
    with pytest.raises(BudgetExceeded):
        check_dissipativity(make_affine(0.99, half_x=100.0), eps=1e-3, budget=10)


def test_controllability_of_kicked_linear(linear_1d):
    res = check_controllability(linear_1d)
    assert res.sigma_min_noise == pytest.approx(1.0)
    assert res.sigma_min_state == pytest.approx(E1, abs=1e-4)
    assert res.passed


def test_noise_independent_map_is_not_controllable():
    sys = RdsSystem(
        name="deaf",
        dim_state=1,
        dim_noise=1,
        map=lambda u, eta: E1 * u,
        d_state=lambda u, eta: np.full(np.shape(u)[:-1] + (1, 1), E1),
        d_noise=lambda u, eta: np.zeros(np.shape(u)[:-1] + (1, 1)),
        invariant_set=Box.cube(1.0, 1),
        noise_support=Box.cube(1.0, 1),
    )
    res = check_controllability(sys)
    assert res.sigma_min_noise == 0.0
    assert not res.passed


def test_validate_catalog_systems(linear_1d, pure_noise):
    for sys in (linear_1d, pure_noise):
        check = validate_system(sys, n_points=2000, n_derivative=16)
        assert check.passed, check
        assert check.zero_residual <= 1e-9


def test_validate_flags_wrong_derivative(make_affine):
    good = make_affine(0.5, half_x=2.0)
    bad = RdsSystem(good.name, 1, 1, good.map, lambda u, eta: 2.0 * good.d_state(u, eta), good.d_noise,
                    good.invariant_set, good.noise_support)
    assert validate_system(good, n_points=500).passed
    assert not validate_system(bad, n_points=500).passed
