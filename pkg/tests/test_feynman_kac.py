import numpy as np
import pytest

from roughpde.coefficients import OperatorCoefficients
from roughpde.feynman_kac import (BackwardField, ExpDecayFunction, InitialMeasure, SpaceGrid, backward_field,
                                  backward_value, exp_decay_family, exp_weight, forward_density,
                                  forward_measure, gaussian_family)
from roughpde.montecarlo import MCParams
from roughpde.reference import transport_field, transport_measure
from roughpde.roughpath import Grid, brownian_lift, lift_piecewise_linear
from roughpde.streams import RandomStream

HEAT = OperatorCoefficients(1, sigma=[["1"]], name="heat")


def _line(n=32):
    t = np.linspace(0, 1, n + 1)
    return lift_piecewise_linear(t[:, None], t)


def test_heat_backward_value_closed_form():
    # u(0, x) = E exp(-(x + B_1)^2 / 2) = exp(-x^2 / 4) / sqrt(2)
    w = _line()
    for x in (0.0, 1.0):
        v, se = backward_value(HEAT, "exp(-x**2/2)", 0.0, [x], w, MCParams(particles=40000, seed=1))
        assert abs(v - np.exp(-x**2 / 4) / np.sqrt(2)) <= 4 * se


def test_backward_field_terminal_row_and_shapes():
    space = SpaceGrid(1, 3.0, 7)
    u = backward_field(HEAT, "exp(-x**2/2)", _line(8), space, steps=[0, 4, 8], mc=MCParams(particles=200))
    assert u.values.shape == (3, 7)
    np.testing.assert_allclose(u.values[-1], np.exp(-space.points()[:, 0] ** 2 / 2))
    assert np.all(u.std_error[-1] == 0) and np.all(u.std_error[0] > 0)
    assert u.to_csv().splitlines()[0] == "t,x_1,u,std_error"


def test_backward_field_crn_matches_single_points():
    space = SpaceGrid(1, 1.0, 3)
    mc = MCParams(particles=300, seed=4)
    w = _line(8)
    u = backward_field(HEAT, "exp(-x**2/2)", w, space, steps=[0], mc=mc)
    # with common random numbers a point uses the same keys as backward_value's particles
    v, _ = backward_value(HEAT, "exp(-x**2/2)", 0.0, [1.0], w, mc)
    assert u.values[0, 2] == pytest.approx(v, rel=1e-12)


def test_transport_field_matches_monte_carlo_engine():
    co = OperatorCoefficients(1, beta=[["1"]], gamma=["0.3"], c="-0.2", b=["0.1"])
    w = brownian_lift(RandomStream(2), Grid.uniform(1.0, 64), 1, alpha=0.45)
    space = SpaceGrid(1, 4.0, 9)
    exact = transport_field(co, "exp(-x**2/2)", w, space, steps=[0, 32])
    mc = backward_field(co, "exp(-x**2/2)", w, space, steps=[0, 32], mc=MCParams(particles=2))
    np.testing.assert_allclose(mc.values, exact.values, rtol=1e-12, atol=1e-14)


def test_transport_measure_matches_forward_measure():
    co = OperatorCoefficients(1, beta=[["1"]], gamma=["0.3"], c="-0.2")
    w = brownian_lift(RandomStream(3), Grid.uniform(1.0, 32), 1)
    nu = InitialMeasure(kind="gaussian", mean=[0.0], std=[1.0])
    a = transport_measure(co, nu, w, 100, seed=5)
    b = forward_measure(co, nu, w, MCParams(particles=100, seed=5))
    np.testing.assert_allclose(a.X, b.X, atol=1e-12)
    np.testing.assert_allclose(a.logw, b.logw, atol=1e-12)


def test_exp_weight_constant_coefficients():
    co = OperatorCoefficients(1, beta=[["1"]], gamma=["0.5"], c="-0.3")
    w = brownian_lift(RandomStream(1), Grid.uniform(1.0, 16), 1)
    states = w.values()
    wt = exp_weight(co, states, w)
    assert wt == pytest.approx(np.exp(-0.3 + 0.5 * (w.values()[-1, 0] - w.values()[0, 0])))


def test_exp_weight_uses_gubinelli_term():
    # gamma(x) = x along X = W (beta = 1): int W dW = (W_T^2 - W_0^2) / 2 exactly
    co = OperatorCoefficients(1, beta=[["1"]], gamma=["x"])
    w = brownian_lift(RandomStream(7), Grid.uniform(1.0, 64), 1)
    W = w.values()
    assert exp_weight(co, W, w) == pytest.approx(np.exp(0.5 * (W[-1, 0] ** 2 - W[0, 0] ** 2)), rel=1e-12)


def test_initial_measures():
    s = RandomStream(0)
    assert np.all(InitialMeasure(kind="dirac", mean=[1.5]).sample(s, 4, 1) == 1.5)
    atoms = InitialMeasure(kind="atoms", points=[[0.0], [1.0]], weights=[1.0, 3.0])
    x = atoms.sample(s, 400, 1)
    assert atoms.mass == 4.0 and (x == 1.0).mean() == pytest.approx(0.75)
    u = InitialMeasure(kind="uniform", low=[-1.0], high=[2.0]).sample(s, 1000, 1)
    assert u.min() >= -1 and u.max() <= 2
    with pytest.raises(ValueError):
        InitialMeasure(kind="atoms", points=[[0.0]], weights=[-1.0])
    with pytest.raises(ValueError):
        InitialMeasure(kind="cauchy")


def test_heat_forward_density():
    # p0 = N(0, 1) -> p_1 = N(0, 2)
    space = SpaceGrid(1, 1.0, 3)
    dens = forward_density(HEAT, "exp(-x**2/2)/sqrt(2*pi)", _line(16), space, steps=[0, 16],
                           mc=MCParams(particles=20000, seed=3))
    exact = np.exp(-space.points()[:, 0] ** 2 / 4) / np.sqrt(4 * np.pi)
    assert np.all(np.abs(dens.values[1] - exact) <= 4 * dens.std_error[1] + 1e-12)
    np.testing.assert_allclose(dens.values[0], np.exp(-space.points()[:, 0] ** 2 / 2) / np.sqrt(2 * np.pi))


def test_particle_measure_pairing_and_csv():
    w = _line(4)
    rho = forward_measure(HEAT, InitialMeasure(mass=2.0), w, MCParams(particles=50, seed=1))
    mass, se = rho.total_mass(rho.row_of(1.0))
    assert mass == 2.0 and se == 0.0
    x, m = rho.atoms(0)
    assert m.sum() == pytest.approx(2.0)
    assert rho.to_csv().splitlines()[0] == "t,particle,X_1,w"
    with pytest.raises(ValueError):
        rho.row_of(0.3)


def test_interpolation_clamps():
    space = SpaceGrid(1, 1.0, 3)
    f = BackwardField(np.array([0.0]), np.array([0]), space, np.array([[1.0, 2.0, 4.0]]), np.zeros((1, 3)))
    np.testing.assert_allclose(f.interpolate(0, np.array([[-5.0], [0.5], [9.0]])), [1.0, 3.0, 4.0])


def test_space_grid_quadrature():
    space = SpaceGrid(2, 3.0, 31)
    w = space.quadrature_weights()
    assert w.sum() == pytest.approx(36.0)
    pts = space.points()
    assert pts.shape == (961, 2)


def test_test_function_families():
    for f in exp_decay_family(1, count=4):
        f.c = 4.0
        assert f.decay_bound_holds(10.0)
    assert len(gaussian_family(2, count=6)) == 6
    bump = ExpDecayFunction("exp(-sqrt(1 + x**2))", order=1, c=1.0)
    assert bump.decay_bound_holds(20.0)
    assert not ExpDecayFunction("1/(1 + x**2)", order=0, c=1.0).decay_bound_holds(20.0)
