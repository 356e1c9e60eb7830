"""Grid-sampled level-2 geometric rough paths.

A path stores its first-level increments and second-level areas only for
consecutive grid points; any other increment is rebuilt with Chen's relation.
Second-level arrays follow ``areas[k, i, j] = int W^i dW^j`` over step ``k``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .streams import as_stream


class GridError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class NotSuperadditiveError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    """Strictly increasing times ``0 = t_0 < ... < t_n = T``."""

    times: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float).ravel()
        if t.size < 2:
            raise GridError("a grid needs at least 2 points")
        if t[0] != 0.0:
            raise GridError(f"grid must start at 0, got {t[0]}")
        if np.any(np.diff(t) <= 0):
            raise GridError("grid times must be strictly increasing")
        t.flags.writeable = False
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T=1.0, n=64):
        return cls(np.linspace(0.0, float(T), int(n) + 1))

    @property
    def T(self):
        return float(self.times[-1])

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def dt(self):
        return np.diff(self.times)

    @property
    def mesh(self):
        return float(self.dt.max())

    def __len__(self):
        return self.times.size

    def index(self, t, tol=1e-12):
        """Index of grid time ``t``; raises GridError when ``t`` is off-grid."""
        i = int(np.searchsorted(self.times, t - tol * max(1.0, self.T)))
        if i < self.times.size and abs(self.times[i] - t) <= tol * max(1.0, self.T):
            return i
        raise GridError(f"time {t} is not a grid point")

    def is_uniform(self, rtol=1e-12):
        dt = self.dt
        return bool(np.all(np.abs(dt - dt[0]) <= rtol * dt[0]))

    def to_json(self):
        if self.is_uniform():
            return {"T": self.T, "steps": self.n_steps}
        return {"times": self.times.tolist()}

    @classmethod
    def from_json(cls, data):
        if "times" in data:
            return cls(data["times"])
        return cls.uniform(data.get("T", 1.0), data["steps"])


def chen_compose(left, right):
    """Compose level-2 increments over [s,t] and [t,u] into one over [s,u].

    Each argument is a pair ``(W, A)`` with ``W`` of shape (..., e) and ``A``
    of shape (..., e, e).
    """
    w1, a1 = (np.asarray(x, dtype=float) for x in left)
    w2, a2 = (np.asarray(x, dtype=float) for x in right)
    if w1.shape[-1:] != w2.shape[-1:] or a1.shape[-2:] != a2.shape[-2:] or a1.shape[-1] != w1.shape[-1]:
        raise DimensionError(f"incompatible increments: {w1.shape}/{a1.shape} vs {w2.shape}/{a2.shape}")
    return w1 + w2, a1 + a2 + w1[..., :, None] * w2[..., None, :]


@dataclass(frozen=True, eq=False)
class GeometricRoughPath:
    """Level-2 rough path sampled on a grid.

    Attributes:
      grid: the time grid.
      increments: (n, e) array, ``W_{t_k, t_{k+1}}``.
      areas: (n, e, e) array, ``WW_{t_k, t_{k+1}}``.
      alpha: Holder exponent in (1/3, 1/2].
      base_point: ``W_0``.
    """

    grid: Grid
    increments: np.ndarray
    areas: np.ndarray
    alpha: float = 0.5
    base_point: np.ndarray = field(default=None)

    def __post_init__(self):
        inc = np.array(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        n, e = inc.shape
        areas = np.array(self.areas, dtype=float).reshape(n, e, e)
        if n != self.grid.n_steps:
            raise DimensionError(f"{n} increments for a grid with {self.grid.n_steps} steps")
        if not 1.0 / 3.0 < self.alpha <= 0.5:
            raise ValueError(f"alpha must lie in (1/3, 1/2], got {self.alpha}")
        base = np.zeros(e) if self.base_point is None else np.array(self.base_point, dtype=float).reshape(e)
        for arr in (inc, areas, base):
            arr.flags.writeable = False
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "areas", areas)
        object.__setattr__(self, "base_point", base)

    @property
    def dim(self):
        return self.increments.shape[1]

    @property
    def n_steps(self):
        return self.grid.n_steps

    @property
    def times(self):
        return self.grid.times

    def values(self):
        """Path values ``W_{t_k}``, shape (n+1, e)."""
        out = np.empty((self.n_steps + 1, self.dim))
        out[0] = self.base_point
        np.cumsum(self.increments, axis=0, out=out[1:])
        out[1:] += self.base_point
        return out

    def increment(self, i, j):
        """Level-2 increment between grid indices ``i <= j`` via Chen's relation."""
        if not 0 <= i <= j <= self.n_steps:
            raise GridError(f"bad index pair ({i}, {j})")
        w, a = self.increments[i:j], self.areas[i:j]
        running = np.cumsum(w, axis=0) - w
        return w.sum(axis=0), a.sum(axis=0) + np.einsum("ki,kj->ij", running, w)

    def increments_from(self, i, stop=None):
        """All increments ``(W_{t_i,t_j}, WW_{t_i,t_j})`` for ``j = i+1..stop``."""
        stop = self.n_steps if stop is None else min(stop, self.n_steps)
        w, a = self.increments[i:stop], self.areas[i:stop]
        cum = np.cumsum(w, axis=0)
        running = cum - w
        area = np.cumsum(a + running[:, :, None] * w[:, None, :], axis=0)
        return cum, area

    def geometricity_residual(self):
        """max |Sym(WW) - W (x) W / 2| over steps."""
        sym = 0.5 * (self.areas + np.swapaxes(self.areas, 1, 2))
        half = 0.5 * self.increments[:, :, None] * self.increments[:, None, :]
        return float(np.abs(sym - half).max(initial=0.0))

    def validate(self, tol=1e-12):
        res = self.geometricity_residual()
        scale = max(1.0, float(np.abs(self.increments).max(initial=0.0)) ** 2)
        if res > tol * scale:
            raise ValueError(f"path is not geometric: residual {res:.3e}")
        return self

    def restrict(self, i, j):
        """Sub-path on ``[t_i, t_j]``, re-based so its grid starts at 0."""
        if not 0 <= i < j <= self.n_steps:
            raise GridError(f"bad index pair ({i}, {j})")
        times = self.times[i:j + 1] - self.times[i]
        return GeometricRoughPath(Grid(times), self.increments[i:j], self.areas[i:j],
                                  self.alpha, self.values()[i])

    def reverse(self):
        """The path ``s -> W_{T-s}``: increments negated, areas transposed."""
        times = self.grid.T - self.times[::-1]
        times[0] = 0.0
        return GeometricRoughPath(Grid(times), -self.increments[::-1],
                                  np.swapaxes(self.areas[::-1], 1, 2),
                                  self.alpha, self.values()[-1])

    def negate(self):
        """The path ``-W``; second level is quadratic and stays unchanged."""
        return GeometricRoughPath(self.grid, -self.increments, self.areas, self.alpha, -self.base_point)

    def coarsen(self, factor):
        """Sub-grid of every ``factor``-th point (the final point always kept)."""
        idx = np.arange(0, self.n_steps + 1, int(factor))
        if idx[-1] != self.n_steps:
            idx = np.append(idx, self.n_steps)
        return self.on_indices(idx)

    def on_indices(self, idx):
        """Path restricted to the grid points ``idx`` (must include 0 and n)."""
        idx = np.asarray(idx, dtype=int)
        incs, areas = zip(*(self.increment(a, b) for a, b in zip(idx[:-1], idx[1:])))
        return GeometricRoughPath(Grid(self.times[idx]), np.array(incs), np.array(areas),
                                  self.alpha, self.base_point)

    def with_alpha(self, alpha):
        return GeometricRoughPath(self.grid, self.increments, self.areas, alpha, self.base_point)

    # ---- serialization -------------------------------------------------

    def to_csv(self, fh=None):
        """CSV with columns t, W_1..W_e, A_11..A_ee (areas of the step ending at t)."""
        e = self.dim
        header = ["t"] + [f"W_{i + 1}" for i in range(e)] + [
            f"A_{i + 1}{j + 1}" for i in range(e) for j in range(e)]
        vals = self.values()
        areas = np.vstack([np.zeros((1, e * e)), self.areas.reshape(self.n_steps, e * e)])
        buf = io.StringIO() if fh is None else fh
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for t, w, a in zip(self.times, vals, areas):
            writer.writerow([repr(float(t))] + [repr(float(x)) for x in w] + [repr(float(x)) for x in a])
        return buf.getvalue() if fh is None else None

    @classmethod
    def from_csv(cls, text, alpha=0.5):
        rows = list(csv.reader(io.StringIO(text)))
        header, data = rows[0], np.array(rows[1:], dtype=float)
        e = sum(1 for h in header if h.startswith("W_"))
        times, vals, areas = data[:, 0], data[:, 1:1 + e], data[1:, 1 + e:]
        return cls(Grid(times), np.diff(vals, axis=0), areas.reshape(-1, e, e), alpha, vals[0])

    def manifest(self, **extra):
        out = {"dim": self.dim, "alpha": self.alpha, "grid": self.grid.to_json()}
        out.update(extra)
        return out


def _samples_and_grid(samples, times):
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise GridError("need at least 2 samples")
    grid = times if isinstance(times, Grid) else Grid(
        np.linspace(0.0, 1.0, x.shape[0]) if times is None else times)
    if len(grid) != x.shape[0]:
        raise DimensionError(f"{x.shape[0]} samples for {len(grid)} grid points")
    return x, grid


def lift_piecewise_linear(samples, times=None, alpha=0.5):
    """Canonical lift of the piecewise-linear interpolant of ``samples``.

    Args:
      samples: (n+1,) or (n+1, e) path values on the grid.
      times: a Grid, an array of times, or None for a uniform grid on [0, 1].
      alpha: Holder exponent recorded on the path.
    """
    x, grid = _samples_and_grid(samples, times)
    inc = np.diff(x, axis=0)
    areas = 0.5 * inc[:, :, None] * inc[:, None, :]
    return GeometricRoughPath(grid, inc, areas, alpha, x[0])


def lift_smooth(func, deriv, times, alpha=0.5, nodes=8):
    """Canonical lift of a C^1 path given by callables.

    Areas ``int_s^t (W_r - W_s) (x) dW_r`` are computed per step by
    Gauss-Legendre quadrature with ``nodes`` points (exact to rounding for
    paths whose integrand is a polynomial of moderate degree on each step).

    Args:
      func: maps an array of times (k,) to values (k, e) or (k,).
      deriv: time derivative of ``func``, same shapes.
    """
    grid = times if isinstance(times, Grid) else Grid(times)
    t = grid.times

    def ev(f, x):
        v = np.asarray(f(x), dtype=float)
        return v.reshape(x.size, -1)

    vals = ev(func, t)
    xg, wg = np.polynomial.legendre.leggauss(int(nodes))
    mid, half = 0.5 * (t[1:] + t[:-1]), 0.5 * np.diff(t)
    r = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    e = vals.shape[1]
    w_r = ev(func, r).reshape(t.size - 1, nodes, e) - vals[:-1, None, :]
    dw_r = ev(deriv, r).reshape(t.size - 1, nodes, e)
    areas = half[:, None, None] * np.einsum("q,nqi,nqj->nij", wg, w_r, dw_r)
    inc = np.diff(vals, axis=0)
    # exact geometricity: keep the antisymmetric part, fix the symmetric one
    areas = 0.5 * (areas - np.swapaxes(areas, 1, 2)) + 0.5 * inc[:, :, None] * inc[:, None, :]
    return GeometricRoughPath(grid, inc, areas, alpha, vals[0])


def chen_fold(increments, areas):
    """Compose consecutive level-2 increments (n, ..., e), (n, ..., e, e) into one."""
    running = np.cumsum(increments, axis=0) - increments
    return increments.sum(axis=0), areas.sum(axis=0) + np.einsum("n...i,n...j->...ij", running, increments)


def brownian_lift(rng, grid, dim, alpha=0.4, refine=16, base_point=None):
    """Brownian motion with its Stratonovich (Levy) area.

    Each grid step is split into ``refine`` Gaussian sub-increments; the area is
    ``W (x) W / 2`` plus the antisymmetric part of the left-point sub-grid sum,
    so the result is geometric exactly.

    Args:
      rng: anything with ``normal(shape)`` (a RandomStream or an int seed).
    """
    rng = as_stream(rng)
    grid = grid if isinstance(grid, Grid) else Grid(grid)
    n, r, e = grid.n_steps, int(refine), int(dim)
    z = np.asarray(rng.normal((n, r, e)), dtype=float).reshape(n, r, e)
    dz = z * np.sqrt(grid.dt / r)[:, None, None]
    inc = dz.sum(axis=1)
    left = np.cumsum(dz, axis=1) - dz
    sums = np.einsum("nri,nrj->nij", left, dz)
    anti = 0.5 * (sums - np.swapaxes(sums, 1, 2))
    areas = 0.5 * inc[:, :, None] * inc[:, None, :] + anti
    return GeometricRoughPath(grid, inc, areas, alpha, base_point)


def pure_area_path(grid, generator=None, alpha=0.5):
    """Path with ``W = 0`` and ``WW_{s,t} = (t - s) * generator`` (antisymmetric)."""
    grid = grid if isinstance(grid, Grid) else Grid(grid)
    gen = np.array([[0.0, 1.0], [-1.0, 0.0]]) if generator is None else np.asarray(generator, dtype=float)
    if not np.allclose(gen, -gen.T):
        raise ValueError("area generator must be antisymmetric")
    e = gen.shape[0]
    return GeometricRoughPath(grid, np.zeros((grid.n_steps, e)), grid.dt[:, None, None] * gen, alpha)


def holder_norm(path, max_lag=None):
    """Grid estimates of ``||W||_alpha`` and ``||WW||_{2 alpha}``.

    A maximum over grid pairs only, hence a lower bound of the continuum norm.
    """
    a = path.alpha
    n = path.n_steps
    first = second = 0.0
    t = path.times
    for i in range(n):
        stop = n if max_lag is None else min(n, i + max_lag)
        w, area = path.increments_from(i, stop)
        dt = t[i + 1:stop + 1] - t[i]
        first = max(first, float((np.linalg.norm(w, axis=1) / dt**a).max()))
        second = max(second, float((np.linalg.norm(area, axis=(1, 2)) / dt**(2 * a)).max()))
    return first, second


def homogeneous_norm(path, max_lag=None):
    """``||W||_alpha + ||WW||_{2 alpha}^{1/2}`` on the grid."""
    first, second = holder_norm(path, max_lag)
    return first + np.sqrt(second)


def holder_control(path):
    """Superadditive control ``omega(s,t) = ||W||_{alpha;[s,t]}^p (t - s)``, ``p = 1/alpha``.

    Returned as an (n+1, n+1) matrix over grid pairs (zero on and below the
    diagonal); the Holder norm on ``[s,t]`` is the homogeneous grid estimate.
    """
    n, a = path.n_steps, path.alpha
    t = path.times
    q = np.zeros((n + 1, n + 1))
    for i in range(n):
        w, area = path.increments_from(i)
        dt = t[i + 1:] - t[i]
        q[i, i + 1:] = np.linalg.norm(w, axis=1) / dt**a + np.sqrt(np.linalg.norm(area, axis=(1, 2))) / dt**a
    # largest pair quotient inside [t_i, t_j]
    h = np.maximum.accumulate(q, axis=1)
    h = np.maximum.accumulate(h[::-1], axis=0)[::-1]
    omega = h ** (1.0 / a) * np.maximum(t[None, :] - t[:, None], 0.0)
    return np.triu(omega, 1)


@dataclass
class ControlRecord:
    """Greedy stopping times of a control and the resulting count ``N_{a;[s,t]}``."""

    omega: Callable
    a: float
    taus: np.ndarray
    count: int
    interval: tuple = (0.0, 1.0)


def grid_control(matrix, grid):
    """Callable ``omega(s, u)`` interpolating a matrix of grid-pair values.

    Off-grid first arguments interpolate linearly between rows; for fixed
    ``s`` the values at grid columns after ``s`` are returned.
    """
    grid = grid if isinstance(grid, Grid) else Grid(grid)
    m = np.asarray(matrix, dtype=float)
    times = grid.times

    def omega(s, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        i = int(np.clip(np.searchsorted(times, s, side="right") - 1, 0, times.size - 2))
        lam = (s - times[i]) / (times[i + 1] - times[i])
        row = (1.0 - lam) * m[i] + lam * m[i + 1]
        row = np.where(times <= s, 0.0, row)
        # linear in u between s (value 0) and the next columns
        xs = np.concatenate([[s], times[times > s]])
        ys = np.concatenate([[0.0], row[times > s]])
        return np.interp(u, xs, ys)

    return omega


def greedy_count(omega, a, interval=None, grid=None, on_grid=False):
    """Greedy stopping times ``tau_{i+1} = inf{u : omega(tau_i, u) >= a} ^ t``.

    Args:
      omega: callable ``omega(s, u_array)`` or an (n+1, n+1) matrix of grid-pair
        values (then ``grid`` is required).
      a: positive threshold.
      interval: ``(s, t)``; defaults to the whole grid.
      grid: Grid (or times) on which the infimum is resolved; the crossing inside
        a grid cell is located by linear interpolation in the second argument.
      on_grid: take the infimum over grid points only (no interpolation).

    Returns:
      ControlRecord with ``count = sup{n : tau_n < t}``.
    """
    if a <= 0:
        raise ValueError("threshold a must be positive")
    if not callable(omega):
        if grid is None:
            raise GridError("a matrix control needs its grid")
        omega = grid_control(omega, grid)
    if grid is None:
        lo, hi = interval if interval is not None else (0.0, 1.0)
        grid = np.linspace(lo, hi, 1025)
    times = grid.times if isinstance(grid, Grid) else np.asarray(grid, dtype=float)
    s, t = interval if interval is not None else (float(times[0]), float(times[-1]))
    pts = times[(times > s) & (times < t)]
    pts = np.append(pts, t)
    taus = [float(s)]
    tau = float(s)
    while tau < t:
        us = pts[pts > tau]
        vals = np.asarray(omega(tau, us), dtype=float)
        hits = np.flatnonzero(vals >= a)
        if hits.size == 0:
            nxt = t
        else:
            k = hits[0]
            u_hi, v_hi = us[k], vals[k]
            if on_grid:
                taus.append(float(u_hi))
                tau = float(u_hi)
                continue
            if k > 0:
                u_lo, v_lo = us[k - 1], vals[k - 1]
            else:
                u_lo, v_lo = tau, float(np.asarray(omega(tau, np.array([tau])))[0])
            nxt = u_hi if v_hi <= v_lo else u_lo + (a - v_lo) / (v_hi - v_lo) * (u_hi - u_lo)
            nxt = min(max(nxt, u_lo), t)
            if nxt <= tau:
                nxt = u_hi
        taus.append(float(nxt))
        tau = float(nxt)
    taus = np.array(taus)
    count = int(np.count_nonzero(taus < t)) - 1
    return ControlRecord(omega, float(a), taus, count, (float(s), float(t)))


def check_superadditive(matrix, tol=1e-12):
    """Largest violation of ``omega(i,j) + omega(j,k) <= omega(i,k)``; raises if > tol."""
    m = np.asarray(matrix, dtype=float)
    n = m.shape[0]
    worst = 0.0
    for j in range(1, n - 1):
        gap = m[:j, j][:, None] + m[j, j + 1:][None, :] - m[:j, j + 1:]
        worst = max(worst, float(gap.max()))
    if worst > tol:
        raise NotSuperadditiveError(f"control violates superadditivity by {worst:.3e}")
    return worst


def path_manifest_json(path, **extra):
    return json.dumps(path.manifest(**extra), indent=2, sort_keys=True)
