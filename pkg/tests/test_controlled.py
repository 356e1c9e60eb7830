import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roughpde.controlled import (ControlledPath, ReferenceMismatch, compose_smooth,
                                 controlled_norm, cumulative_integral, product, rough_integral, time_reverse)
from roughpde.roughpath import Grid, GridError, brownian_lift, lift_piecewise_linear, pure_area_path
from roughpde.streams import RandomStream


def _line(n=64):
    t = np.linspace(0, 1, n + 1)
    return lift_piecewise_linear(t[:, None], t)


def test_zero_integrand():
    w = _line()
    value, _ = rough_integral(ControlledPath.constant(w, 0.0))
    assert value == 0.0


def test_w_dw_on_line():
    w = _line()
    value, rep = rough_integral(ControlledPath.of_path(w))
    assert float(value) == pytest.approx(0.5, abs=1e-14)


def test_scalar_area_integral():
    grid = Grid.uniform(1.0, 8)
    w = pure_area_path(grid)
    n = grid.n_steps + 1
    # Y_2 moves with W^1 (Y'_{21} = 1), so the sum is int W^1 dW^2 = WW^{12}_{0,1} = 1
    der = np.zeros((n, 2, 2))
    der[:, 1, 0] = 1.0
    value, _ = rough_integral(ControlledPath(w, np.zeros((n, 2)), der))
    assert float(value) == pytest.approx(1.0, abs=1e-14)


def test_interval_and_errors():
    w = _line(8)
    y = ControlledPath.of_path(w)
    value, _ = rough_integral(y, interval=(0.25, 0.75))
    assert float(value) == pytest.approx(0.5 * (0.75**2 - 0.25**2), abs=1e-14)
    with pytest.raises(GridError):
        rough_integral(y, interval=(0.1, 0.5))
    with pytest.raises(GridError):
        rough_integral(y, interval=(0.75, 0.25))


def test_cumulative_integral_matches_closed_form():
    w = brownian_lift(RandomStream(0), Grid.uniform(1.0, 128), 1)
    run = cumulative_integral(ControlledPath.of_path(w))
    W = w.values()[:, 0]
    # geometric lift: int W dW = W^2 / 2 exactly
    np.testing.assert_allclose(run, 0.5 * W**2, atol=1e-13)


def test_product_examples():
    w = brownian_lift(RandomStream(1), Grid.uniform(1.0, 32), 1)
    a = ControlledPath.of_path(w)
    p = product(a, a)
    W = w.values()[:, 0]
    np.testing.assert_allclose(p.values[:, 0], W**2)
    np.testing.assert_allclose(p.deriv[:, 0, 0], 2 * W)
    c = product(ControlledPath.constant(w, [3.0]), a)
    np.testing.assert_allclose(c.values[:, 0], 3 * W)
    np.testing.assert_allclose(c.deriv[:, 0, 0], 3.0)
    z = product(a, ControlledPath.constant(w, 0.0))
    assert np.all(z.values == 0) and np.all(z.deriv == 0)


def test_product_reference_mismatch():
    a = ControlledPath.of_path(_line(8))
    # equal content on a separate object is the same reference
    product(a, ControlledPath.of_path(_line(8)))
    with pytest.raises(ReferenceMismatch):
        product(a, ControlledPath.of_path(_line(16)))
    with pytest.raises(ReferenceMismatch):
        product(a, ControlledPath.of_path(a.reference.negate()))


def test_compose_examples():
    w = brownian_lift(RandomStream(2), Grid.uniform(1.0, 32), 1)
    a = ControlledPath.of_path(w)
    ident = compose_smooth(lambda x: x, lambda x: np.ones_like(x), a)
    np.testing.assert_array_equal(ident.values, a.values)
    np.testing.assert_array_equal(ident.deriv, a.deriv)
    const = compose_smooth(lambda x: np.full_like(x, 2.0), lambda x: np.zeros_like(x), a)
    assert np.all(const.values == 2.0) and np.all(const.deriv == 0)
    sq = compose_smooth(lambda x: x**2, lambda x: 2 * x, a)
    p = product(a, a)
    np.testing.assert_allclose(sq.values, p.values)
    np.testing.assert_allclose(sq.deriv, p.deriv)


def test_time_reverse_integral_flips_sign():
    w = brownian_lift(RandomStream(3), Grid.uniform(1.0, 64), 1)
    y = ControlledPath.of_path(w)
    r = time_reverse(y)
    fwd, _ = rough_integral(y)
    bwd, _ = rough_integral(r)
    # int_0^T W dW run backwards along W_{T-.}: W_0^2/2 - W_T^2/2
    assert float(bwd) == pytest.approx(-float(fwd), abs=1e-13)


def test_controlled_norm_of_path_itself():
    w = brownian_lift(RandomStream(4), Grid.uniform(1.0, 32), 1)
    d_norm, r_norm = controlled_norm(ControlledPath.of_path(w))
    assert d_norm == 0.0 and r_norm <= 1e-14


def test_composition_norm_scaling():
    # ||phi(Y)|| grows at most quadratically in (1 + ||W||)
    base = brownian_lift(RandomStream(5), Grid.uniform(1.0, 64), 1)
    norms = []
    for scale in (1.0, 2.0, 4.0):
        w = type(base)(base.grid, scale * base.increments, scale**2 * base.areas, base.alpha)
        y = compose_smooth(np.sin, np.cos, ControlledPath.of_path(w))
        norms.append(sum(controlled_norm(y)))
    assert norms[2] <= 16 * 4 * max(norms[0], 1e-12) + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5000), st.floats(-2, 2), st.floats(-2, 2))
def test_integral_is_linear(seed, a, b):
    w = brownian_lift(RandomStream(seed), Grid.uniform(1.0, 32), 1)
    y1 = compose_smooth(np.sin, np.cos, ControlledPath.of_path(w))
    y2 = compose_smooth(np.cos, lambda x: -np.sin(x), ControlledPath.of_path(w))
    comb = ControlledPath(w, a * y1.values + b * y2.values, a * y1.deriv + b * y2.deriv)
    v, _ = rough_integral(comb)
    v1, _ = rough_integral(y1)
    v2, _ = rough_integral(y2)
    assert float(v) == pytest.approx(a * float(v1) + b * float(v2), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5000))
def test_gradient_integrand_is_exact(seed):
    # geometric lifts satisfy the chain rule: int cos(W) dW = sin(W_T) - sin(W_0) up to O(mesh^{3 alpha - 1})
    w = brownian_lift(RandomStream(seed), Grid.uniform(1.0, 1024), 1)
    v, _ = rough_integral(compose_smooth(np.cos, lambda x: -np.sin(x), ControlledPath.of_path(w)))
    W = w.values()[:, 0]
    assert float(v) == pytest.approx(np.sin(W[-1]) - np.sin(W[0]), abs=5e-3)
