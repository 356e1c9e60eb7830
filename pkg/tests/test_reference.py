import numpy as np
import pytest

from roughpde.coefficients import OperatorCoefficients
from roughpde.feynman_kac import InitialMeasure, SpaceGrid
from roughpde.montecarlo import MCParams
from roughpde.reference import (ConvergenceTable, SmoothDriver, classical_fk, dyadic_approximation,
                                fd_backward_solve, fd_forward_solve, rough_metric, schauder_path,
                                transport_field, wong_zakai_study)
from roughpde.roughpath import Grid, brownian_lift
from roughpde.streams import RandomStream

HEAT = OperatorCoefficients(1, sigma=[["1"]], name="heat")


def _wave(n=256):
    return SmoothDriver(lambda t: np.stack([np.sin(2 * t)], 1), lambda t: np.stack([2 * np.cos(2 * t)], 1),
                        np.linspace(0, 1, n + 1), name="wave")


def test_smooth_driver_check():
    assert _wave().check() < 1e-3
    bad = SmoothDriver(lambda t: np.stack([np.sin(t)], 1), lambda t: np.stack([2 * np.cos(t)], 1),
                       np.linspace(0, 1, 65))
    with pytest.raises(ValueError):
        bad.check()
    lin = SmoothDriver.linear(T=2.0, n=8, slope=[1.0, -1.0])
    assert lin.dim == 2 and lin.T == 2.0


def test_piecewise_linear_driver():
    d = SmoothDriver.piecewise_linear([0, 0.5, 1], [0, 1, 0], np.linspace(0, 1, 9))
    np.testing.assert_allclose(d.values(np.array([0.25, 0.75]))[:, 0], [0.5, 0.5])
    np.testing.assert_allclose(d.derivative(np.array([0.25, 0.75]))[:, 0], [2.0, -2.0])


def test_fd_heat_converges_to_closed_form():
    # u(0, x) = exp(-x^2 / 4) / sqrt(2) for g = exp(-x^2/2), T = 1
    errs = []
    for pts, nt in ((161, 64), (321, 128), (641, 256)):
        space = SpaceGrid(1, 8.0, pts)
        u = fd_backward_solve(HEAT, "exp(-x**2/2)", _wave(), space, n_time=nt)
        x = space.points()[:, 0]
        errs.append(np.abs(u.values[0] - np.exp(-x**2 / 4) / np.sqrt(2)).max())
    assert errs[2] < errs[1] < errs[0] and errs[2] < 1e-4


def test_fd_transport_matches_closed_form():
    co = OperatorCoefficients(1, beta=[["1"]], gamma=["0.3"], c="-0.2")
    space = SpaceGrid(1, 10.0, 1001)
    fd = fd_backward_solve(co, "exp(-x**2/2)", _wave(), space, n_time=512)
    exact = transport_field(co, "exp(-x**2/2)", _wave().lift(), space, steps=[0])
    assert np.abs(fd.values[0] - exact.values[0]).max() < 2e-3


def test_fd_forward_conserves_mass_for_heat():
    space = SpaceGrid(1, 10.0, 401)
    p = fd_forward_solve(HEAT, "exp(-x**2/2)/sqrt(2*pi)", _wave(), space, n_time=128)
    w = space.quadrature_weights()
    assert p.values[-1] @ w == pytest.approx(1.0, abs=1e-6)
    x = space.points()[:, 0]
    np.testing.assert_allclose(p.values[-1], np.exp(-x**2 / 4) / np.sqrt(4 * np.pi), atol=2e-4)


def test_fd_forward_backward_duality():
    co = OperatorCoefficients(1, sigma=[["0.8"]], b=["-x/2"], beta=[["0.5*cos(x)"]], gamma=["0.2*sin(x)"])
    space = SpaceGrid(1, 10.0, 801)
    w = space.quadrature_weights()
    u = fd_backward_solve(co, "exp(-x**2/2)", _wave(), space, n_time=256)
    p = fd_forward_solve(co, "exp(-(x-0.3)**2/2)/sqrt(2*pi)", _wave(), space, n_time=256)
    assert (p.values[-1] * u.values[-1]) @ w == pytest.approx((p.values[0] * u.values[0]) @ w, abs=2e-3)


def test_classical_fk_agrees_with_rough_solver_on_smooth_driver():
    co = OperatorCoefficients(1, sigma=[["0.5"]], beta=[["0.6*cos(x) + 0.3"]], gamma=["0.3*sin(x)"])
    mc = MCParams(particles=20000, seed=2)
    a, sa = classical_fk(co, "exp(-x**2/2)", _wave(), 0.0, [0.2], mc, n_steps=256)
    b, sb = classical_fk(co, "exp(-x**2/2)", _wave(), 0.0, [0.2], mc, n_steps=256, method="davie")
    assert abs(a - b) <= 4 * np.hypot(sa, sb) + 5e-3


def test_rough_metric_properties():
    w = brownian_lift(RandomStream(1), Grid.uniform(1.0, 64), 1)
    assert rough_metric(w, w) == 0.0
    d4, d5 = dyadic_approximation(w, 4), dyadic_approximation(w, 5)
    assert rough_metric(w, d4) == pytest.approx(rough_metric(d4, w.with_alpha(d4.alpha)), rel=1e-12)
    assert rough_metric(dyadic_approximation(w, 6), w) == pytest.approx(0.0, abs=1e-12)
    assert rough_metric(w, d4) <= rough_metric(w, d5) + rough_metric(d5, d4) + 1e-12
    with pytest.raises(ValueError):
        rough_metric(w, w.coarsen(2))


def test_schauder_path_is_deterministic_and_geometric():
    g = Grid.uniform(1.0, 256)
    a, b = schauder_path(g, 8, rng=3), schauder_path(g, 8, rng=3)
    np.testing.assert_array_equal(a.increments, b.increments)
    assert a.geometricity_residual() <= 1e-15
    # depth-8 series is linear between dyadic points of level 8
    assert rough_metric(dyadic_approximation(a, 8), a) == pytest.approx(0.0, abs=1e-12)


def test_convergence_table_monotonicity_rule():
    t = ConvergenceTable([{"level": 1, "metric": 1.0, "field_gap": 0.5, "kr_gap": 0.3, "field_gaps": [0.4, 0.6]},
                          {"level": 2, "metric": 0.5, "field_gap": 0.55, "kr_gap": 0.2, "field_gaps": [0.5, 0.6]}])
    # increase 0.05 within 2 x max seed se (se = 0.1 / sqrt(2)) -> allowed
    assert t.is_decreasing("field_gap") and t.is_decreasing("metric") and t.is_decreasing("kr_gap")
    assert not t.is_decreasing("field_gap", factor=0.1)
    assert t.to_csv().splitlines()[0] == "level,metric,field_gap,kr_gap"


def test_small_wong_zakai_study():
    target = schauder_path(Grid.uniform(1.0, 128), 7, rng=0)
    co = OperatorCoefficients(1, sigma=[["0.5"]], b=["-x/2"], beta=[["0.6*cos(x) + 0.3"]], gamma=["0.3*sin(x)"])
    table = wong_zakai_study(target, [2, 4, 6], co, "exp(-x**2/2)", InitialMeasure(), SpaceGrid(1, 4.0, 9),
                             MCParams(particles=50), seeds=range(2), field_steps=[0], kr_steps=[128])
    assert table.column("metric")[-1] < table.column("metric")[0]
    assert table.column("field_gap")[-1] < table.column("field_gap")[0]
