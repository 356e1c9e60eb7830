import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roughpde.roughpath import (DimensionError, GeometricRoughPath, Grid, GridError, NotSuperadditiveError,
                                brownian_lift, chen_compose, chen_fold, check_superadditive, greedy_count,
                                grid_control, holder_control, holder_norm, lift_piecewise_linear,
                                lift_smooth, pure_area_path)
from roughpde.streams import RandomStream


def test_grid_validation_and_index():
    g = Grid.uniform(2.0, 8)
    assert g.T == 2.0 and g.n_steps == 8
    assert g.index(0.5) == 2
    with pytest.raises(GridError):
        g.index(0.3)
    with pytest.raises(ValueError):
        Grid(np.array([0.0, 0.5, 0.4]))


def test_linear_path_area_is_half_square():
    path = lift_piecewise_linear(np.array([[0.0, 0.0], [1.0, 2.0]]), np.array([0.0, 1.0]))
    w, a = path.increment(0, 1)
    np.testing.assert_allclose(w, [1.0, 2.0])
    np.testing.assert_allclose(a, 0.5 * np.outer(w, w))


def test_chen_compose_dimension_mismatch():
    with pytest.raises(DimensionError):
        chen_compose((np.zeros(2), np.zeros((2, 2))), (np.zeros(3), np.zeros((3, 3))))


def test_pure_area_path():
    path = pure_area_path(Grid.uniform(1.0, 10))
    w, a = path.increment(0, 10)
    np.testing.assert_allclose(w, 0.0)
    np.testing.assert_allclose(a, [[0.0, 1.0], [-1.0, 0.0]], atol=1e-14)
    assert path.geometricity_residual() == 0.0


def test_unit_square_loop_area():
    # counterclockwise unit square: antisymmetric area 1
    pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]], dtype=float)
    path = lift_piecewise_linear(pts, np.linspace(0, 1, 5))
    _, a = path.increment(0, 4)
    np.testing.assert_allclose(0.5 * (a[0, 1] - a[1, 0]), 1.0)


def test_smooth_lift_matches_fine_piecewise_linear():
    grid = Grid.uniform(1.0, 16)
    f = lambda t: np.stack([np.cos(3 * t), np.sin(2 * t)], axis=1)
    df = lambda t: np.stack([-3 * np.sin(3 * t), 2 * np.cos(2 * t)], axis=1)
    smooth = lift_smooth(f, df, grid.times)
    fine_t = np.linspace(0, 1, 16 * 512 + 1)
    fine = lift_piecewise_linear(f(fine_t), fine_t).on_indices(np.arange(0, fine_t.size, 512))
    np.testing.assert_allclose(smooth.areas, fine.areas, atol=1e-7)


def test_reverse_and_negate():
    w = brownian_lift(RandomStream(1), Grid.uniform(1.0, 32), 2)
    r = w.reverse()
    inc, area = r.increment(0, 32)
    winc, warea = w.increment(0, 32)
    np.testing.assert_allclose(inc, -winc)
    # reversing a path maps the Levy area to its negative
    anti = lambda a: 0.5 * (a - a.T)
    np.testing.assert_allclose(anti(area), -anti(warea), atol=1e-13)
    np.testing.assert_allclose(r.reverse().increments, w.increments)
    n = w.negate()
    np.testing.assert_allclose(n.values(), -w.values())
    assert n.geometricity_residual() <= 1e-15


def test_csv_roundtrip_exact():
    w = brownian_lift(RandomStream(2), Grid.uniform(1.0, 20), 2, alpha=0.45)
    back = GeometricRoughPath.from_csv(w.to_csv(), alpha=0.45)
    np.testing.assert_array_equal(back.times, w.times)
    np.testing.assert_array_equal(back.areas, w.areas)
    np.testing.assert_allclose(back.increments, w.increments, rtol=0, atol=1e-15)
    assert w.to_csv().splitlines()[0] == "t,W_1,W_2,A_11,A_12,A_21,A_22"


def test_manifest_fields():
    w = brownian_lift(RandomStream(2), Grid.uniform(1.0, 4), 1)
    m = w.manifest(seed=2)
    assert m["dim"] == 1 and m["alpha"] == 0.4 and m["seed"] == 2 and "grid" in m


def test_brownian_second_moments():
    grid = Grid.uniform(1.0, 1)
    incs = []
    for seed in range(4000):
        incs.append(brownian_lift(RandomStream(seed), grid, 2, refine=4).increments[0])
    incs = np.array(incs)
    np.testing.assert_allclose(incs.T @ incs / len(incs), np.eye(2), atol=0.06)


def test_brownian_quadratic_variation():
    w = brownian_lift(RandomStream(0), Grid.uniform(1.0, 2**14), 2)
    qv = w.increments.T @ w.increments
    np.testing.assert_allclose(qv, np.eye(2), atol=0.04)


def test_holder_norm_of_linear_path():
    path = lift_piecewise_linear(np.linspace(0, 2, 33)[:, None], np.linspace(0, 1, 33), alpha=0.5)
    first, second = holder_norm(path)
    # 2|t-s| / |t-s|^(1/2) and 2|t-s|^2 / |t-s| peak on the longest pair
    assert first == pytest.approx(2.0)
    assert second == pytest.approx(2.0)


def test_holder_control_is_superadditive():
    w = brownian_lift(RandomStream(5), Grid.uniform(1.0, 40), 2)
    assert check_superadditive(holder_control(w)) <= 1e-12


def test_check_superadditive_rejects():
    m = np.array([[0, 1, 1.5], [0, 0, 1], [0, 0, 0]], dtype=float)
    with pytest.raises(NotSuperadditiveError):
        check_superadditive(m)


def test_greedy_hand_cases():
    rec = greedy_count(lambda s, u: u - s, 0.3, interval=(0.0, 1.0))
    assert rec.count == 3
    np.testing.assert_allclose(rec.taus, [0, 0.3, 0.6, 0.9, 1.0], atol=1e-12)
    rec = greedy_count(lambda s, u: (u - s) ** 2, 0.25, interval=(0.0, 1.0))
    assert rec.count == 1
    with pytest.raises(ValueError):
        greedy_count(lambda s, u: u - s, 0.0)


def test_greedy_matrix_needs_grid():
    with pytest.raises(GridError):
        greedy_count(np.zeros((3, 3)), 1.0)


def test_grid_control_interpolates():
    grid = Grid.uniform(1.0, 4)
    t = grid.times
    m = np.triu(np.maximum(t[None, :] - t[:, None], 0))
    om = grid_control(m, grid)
    np.testing.assert_allclose(om(0.25, np.array([0.5, 0.75, 1.0])), [0.25, 0.5, 0.75])
    np.testing.assert_allclose(om(0.3, np.array([0.5])), [0.2])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30), st.integers(1, 3))
def test_chen_relation_property(seed, n, dim):
    w = brownian_lift(RandomStream(seed), Grid.uniform(1.0, n), dim)
    rng = np.random.default_rng(seed)
    i, k = sorted(rng.choice(n + 1, 2, replace=False))
    j = int(rng.integers(i, k + 1))
    whole = w.increment(i, k)
    split = chen_compose(w.increment(i, j), w.increment(j, k))
    np.testing.assert_allclose(whole[1], split[1], atol=1e-13)
    folded = chen_fold(w.increments[i:k], w.areas[i:k])
    np.testing.assert_allclose(whole[1], folded[1], atol=1e-13)
    assert w.geometricity_residual() <= 1e-14


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_coarsen_preserves_total_increment(seed, factor):
    w = brownian_lift(RandomStream(seed), Grid.uniform(1.0, 24), 2)
    c = w.coarsen(factor)
    a, b = w.increment(0, 24), c.increment(0, c.n_steps)
    np.testing.assert_allclose(a[0], b[0], atol=1e-14)
    np.testing.assert_allclose(a[1], b[1], atol=1e-14)
    assert c.geometricity_residual() <= 1e-14


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=25), st.floats(0.05, 3.0))
def test_greedy_additive_control_counts(steps, a):
    # additive control: greedy count equals floor(total / a) up to the last partial block
    F = np.concatenate([[0.0], np.cumsum(steps)])
    grid = Grid(np.linspace(0, 1, F.size))
    m = np.triu(np.maximum(F[None, :] - F[:, None], 0.0))
    rec = greedy_count(m, a, grid=grid, on_grid=True)
    idx = [int(np.argmin(np.abs(grid.times - t))) for t in rec.taus]
    for i, j in zip(idx[:-1], idx[1:-1] if len(idx) > 2 else []):
        assert m[i, j] >= a and (j - 1 == i or m[i, j - 1] < a)
    assert rec.count <= F[-1] / a + 1e-9
