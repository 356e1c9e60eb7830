"""Monte Carlo solvers for the backward RPDE and the measure-valued forward RPDE.

Backward: ``u(t, x) = E[g(X_T) exp(int_t^T c dr + int_t^T gamma(X) dW)]`` along
the rough SDE ``dX = b dt + sigma dB + beta(X) dW`` started at ``(t, x)``.
Forward: ``rho_t(f) = E_nu[f(X_t) exp(int_0^t c dr + int_0^t gamma(X) dW)]``.
"""

from __future__ import annotations

import csv
import io
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import sympy as sp
from scipy.interpolate import RegularGridInterpolator

from .coefficients import compile_array, parse, state_symbols
from .montecarlo import MCParams, simulate, weighted_mean
from .rde import JointLift
from .streams import as_stream


class ExtrapolationWarning(UserWarning):
    pass


def adjoint_coefficients(coeffs):
    """Coefficients of ``L*`` and ``Gamma*_k`` (see ``OperatorCoefficients.adjoint``)."""
    return coeffs.adjoint()


@dataclass(frozen=True, eq=False)
class SpaceGrid:
    """Tensor grid on the box ``[-L, L]^d`` with ``points_per_axis`` nodes per axis."""

    dim: int
    half_width: float
    points_per_axis: int

    @property
    def axes(self):
        ax = np.linspace(-self.half_width, self.half_width, self.points_per_axis)
        return [ax] * self.dim

    @property
    def h(self):
        return 2.0 * self.half_width / (self.points_per_axis - 1)

    @property
    def shape(self):
        return (self.points_per_axis,) * self.dim

    def points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def quadrature_weights(self):
        """Trapezoid weights on the tensor grid, flattened like ``points()``."""
        w1 = np.full(self.points_per_axis, self.h)
        w1[0] = w1[-1] = 0.5 * self.h
        w = w1
        for _ in range(self.dim - 1):
            w = np.multiply.outer(w, w1)
        return w.ravel()

    def to_json(self):
        return {"dim": self.dim, "L": self.half_width, "points": self.points_per_axis}


def as_function(f, dim):
    """Batched evaluator (N, d) -> (N,) from a callable, sympy expression or string."""
    if callable(f) and not isinstance(f, sp.Basic):
        return f
    return compile_array(parse(f, state_symbols(dim)), state_symbols(dim))


class ExpDecayFunction:
    """Smooth function with derivatives bounded by ``c exp(-|x| / c)``.

    Args:
      expr: sympy expression or string in ``x1..xd``.
      dim: state dimension.
      order: number of derivatives tracked.
      c: declared decay constant (optional; see ``fit_exp_decay``).
    """

    def __init__(self, expr, dim=1, order=4, c=None, name=None):
        self.dim = dim
        self.syms = state_symbols(dim)
        self.expr = parse(expr, self.syms)
        self.order = int(order)
        self.c = c
        self.name = name or sp.sstr(self.expr)
        self._f = compile_array(self.expr, self.syms)

    def __call__(self, x):
        return self._f(np.asarray(x, dtype=float).reshape(-1, self.dim))

    def derivatives(self, k):
        """Evaluator of all k-th order partial derivatives, (N, d) -> (N, n_k)."""
        exprs = [sp.diff(self.expr, *combo) for combo in
                 itertools.combinations_with_replacement(self.syms, k)] if k else [self.expr]
        return compile_array(exprs, self.syms)

    def decay_bound_holds(self, L, samples=64):
        """``|D^k f(x)| <= c exp(-|x|/c)`` on radii in [0, L] along each axis and diagonal."""
        if self.c is None:
            raise ValueError("no decay constant declared")
        radii = np.linspace(0.0, L, samples)
        dirs = [np.eye(self.dim)[i] for i in range(self.dim)] + [np.ones(self.dim) / np.sqrt(self.dim)]
        bound = self.c * np.exp(-radii / self.c)
        for k in range(self.order + 1):
            dk = self.derivatives(k)
            for sgn, u in itertools.product((1.0, -1.0), dirs):
                vals = np.abs(dk(sgn * radii[:, None] * u[None, :])).max(axis=1)
                if np.any(vals > bound * (1 + 1e-12)):
                    return False
        return True


def exp_decay_family(dim=1, count=4, scale=1.0):
    """Bundled C^3_exp test functions ``P(x) exp(-sqrt(1 + |x/scale|^2))``."""
    x = state_symbols(dim)
    r = sp.sqrt(1 + sum((xi / scale) ** 2 for xi in x))
    window = sp.exp(-r)
    polys = [sp.Integer(1), x[0], x[0] ** 2 - 1, sp.Rational(1, 2) * x[0] ** 3 - x[0]]
    if dim > 1:
        polys += [x[1], x[0] * x[1]]
    return [ExpDecayFunction(p * window, dim, order=3, name=f"expdecay[{i}]")
            for i, p in enumerate(polys[:count])]


def gaussian_family(dim=1, count=4, width=1.5):
    """Bundled C^3_b test functions: Gaussian-windowed polynomials."""
    x = state_symbols(dim)
    window = sp.exp(-sum(xi**2 for xi in x) / (2 * width**2))
    polys = [sp.Integer(1), x[0], x[0] ** 2, 1 + x[0] - x[0] ** 3 / 4]
    if dim > 1:
        polys += [x[1], x[0] * x[1]]
    return [p * window for p in polys[:count]]


@dataclass
class BackwardField:
    """Field samples ``u(t, x)`` on a time subset times a space grid.

    Attributes:
      times: (R,) times.
      steps: (R,) indices into the driver grid.
      space: SpaceGrid.
      values: (R, M) values at ``space.points()``.
      std_error: (R, M) Monte Carlo standard errors.
      provenance: manifest data (particles, seed, driver id, ...).
    """

    times: np.ndarray
    steps: np.ndarray
    space: SpaceGrid
    values: np.ndarray
    std_error: np.ndarray
    provenance: dict = field(default_factory=dict)

    def interpolate(self, row, points, values=None):
        """Multilinear interpolation of row ``row`` at (N, d) points.

        Points outside the box are clamped to its boundary.
        """
        vals = self.values[row] if values is None else values
        pts = np.clip(np.asarray(points, dtype=float).reshape(-1, self.space.dim),
                      -self.space.half_width, self.space.half_width)
        if self.space.dim == 1:
            return np.interp(pts[:, 0], self.space.axes[0], vals)
        interp = RegularGridInterpolator(self.space.axes, vals.reshape(self.space.shape))
        return interp(pts)

    def to_csv(self):
        d = self.space.dim
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t"] + [f"x_{i + 1}" for i in range(d)] + ["u", "std_error"])
        pts = self.space.points()
        for t, u, se in zip(self.times, self.values, self.std_error):
            for p, v, s in zip(pts, u, se):
                writer.writerow([repr(float(t))] + [repr(float(c)) for c in p] + [repr(float(v)), repr(float(s))])
        return buf.getvalue()


def _driver_id(driver):
    return {"dim": driver.dim, "steps": driver.n_steps, "T": driver.grid.T, "alpha": driver.alpha}


def exp_weight(coeffs, states, driver, start=0):
    """Rough exponential weight along given trajectories.

    ``exp(int c dr + int gamma(X) dW)``; the second integral is a compensated
    sum with Gubinelli derivative ``D gamma(X) V(X)`` where ``V`` is ``beta``
    for a rough-path driver and ``(sigma, beta)`` for a JointLift.

    Args:
      states: (n+1-start, d) or (n+1-start, N, d) states on the grid from ``start``.
      driver: GeometricRoughPath or JointLift.

    Returns:
      Weight(s); (N,) for batched states.
    """
    num = coeffs.numeric
    if isinstance(driver, JointLift):
        incs, areas, m = driver.z_increments, driver.z_areas, driver.m
        grid = driver.grid
    else:
        incs, areas, m = driver.increments, driver.areas, 0
        grid = driver.grid
    X = np.asarray(states, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[:, None]
    R, N, d = X.shape
    flat = X[:-1].reshape(-1, d)
    dts = grid.dt[start:start + R - 1]
    logw = (num.c(flat).reshape(R - 1, N) * dts[:, None]).sum(axis=0)
    e = num.e
    if e:
        inc = incs[start:start + R - 1]
        area = areas[start:start + R - 1]
        V = num.V(flat).reshape(R - 1, N, d, -1)
        if m == 0:
            V = V[..., num.m:]
        gam = num.gamma(flat).reshape(R - 1, N, e)
        dg = num.Dgamma(flat).reshape(R - 1, N, e, d)
        logw += np.einsum("rnk,rk->n", gam, inc[:, m:m + e])
        logw += np.einsum("rnki,rnil,rlk->n", dg, V, area[:, :, m:m + e])
    with np.errstate(over="raise"):
        w = np.exp(logw)
    return w[0] if single else w


def backward_value(coeffs, g, t, x, driver, mc=None):
    """Monte Carlo estimate of ``u(t, x)``.

    Returns:
      (estimate, std_error).
    """
    mc = mc or MCParams()
    i = driver.grid.index(t)
    gf = as_function(g, coeffs.dim)
    x0 = np.broadcast_to(np.asarray(x, dtype=float).reshape(1, coeffs.dim), (int(mc.particles), coeffs.dim))
    stream = as_stream(int(mc.seed)).spawn("backward")
    tr = simulate(coeffs.numeric, driver, x0, stream, mc, start=i)
    mean, se = weighted_mean(gf(tr.X[-1]), tr.logw[-1])
    return float(mean), float(se)


def backward_field(coeffs, g, driver, space, steps=None, mc=None, driver_id=None):
    """``u`` on ``driver`` grid indices ``steps`` times the space grid.

    With ``mc.crn`` every (t, x) uses the same particle keys, hence the same
    Brownian noise per grid step.
    """
    mc = mc or MCParams()
    n = driver.n_steps
    steps = np.arange(n + 1) if steps is None else np.asarray(steps, dtype=int)
    gf = as_function(g, coeffs.dim)
    pts = space.points()
    M, N = pts.shape[0], int(mc.particles)
    root = as_stream(int(mc.seed)).spawn("backward")
    vals = np.empty((steps.size, M))
    ses = np.empty((steps.size, M))
    x0 = np.repeat(pts, N, axis=0)
    for row, i in enumerate(steps):
        if i == n:
            vals[row], ses[row] = gf(pts), 0.0
            continue
        if mc.crn:
            ids, stream = np.tile(np.arange(N), M), root
        else:
            ids, stream = np.arange(M * N), root.spawn(int(i))
        tr = simulate(coeffs.numeric, driver, x0, stream, mc, start=int(i), particle_ids=ids)
        mean, se = weighted_mean(gf(tr.X[-1]).reshape(M, N), tr.logw[-1].reshape(M, N))
        vals[row], ses[row] = mean, se
    prov = {"particles": N, "seed": int(mc.seed), "crn": bool(mc.crn), "refine": int(mc.refine),
            "driver": driver_id or _driver_id(driver), "coefficients": coeffs.name}
    return BackwardField(driver.times[steps], steps, space, vals, ses, prov)


@dataclass
class InitialMeasure:
    """Finite initial measure ``nu``.

    kind ``"dirac"`` uses ``mean``; ``"gaussian"`` uses ``mean`` and ``std``;
    ``"atoms"`` uses ``points`` and ``weights``; ``"uniform"`` uses ``low`` and ``high``.
    """

    kind: str = "gaussian"
    mass: float = 1.0
    mean: object = 0.0
    std: object = 1.0
    points: object = None
    weights: object = None
    low: object = -1.0
    high: object = 1.0

    def __post_init__(self):
        if self.kind not in ("dirac", "gaussian", "atoms", "uniform"):
            raise ValueError(f"unknown initial measure kind {self.kind!r}")
        if self.kind == "atoms":
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or w.sum() <= 0:
                raise ValueError("atom weights must be nonnegative with positive sum")
            self.mass = float(w.sum())
        if self.mass <= 0:
            raise ValueError("measure mass must be positive")

    def sample(self, stream, n, d):
        """(n, d) samples; particle ``i`` depends only on its own key."""
        stream = as_stream(stream)
        if self.kind == "dirac":
            return np.broadcast_to(np.asarray(self.mean, dtype=float).reshape(1, -1), (n, d)).copy()
        if self.kind == "gaussian":
            z = stream.normal_for(np.arange(n), d)
            return np.asarray(self.mean, dtype=float).reshape(1, -1) + np.asarray(self.std, dtype=float) * z
        if self.kind == "uniform":
            lo, hi = np.asarray(self.low, dtype=float), np.asarray(self.high, dtype=float)
            u = stream.uniform_for(np.arange(n), d)
            return lo + (hi - lo) * u
        pts = np.asarray(self.points, dtype=float).reshape(-1, d)
        cdf = np.cumsum(np.asarray(self.weights, dtype=float))
        cdf /= cdf[-1]
        # stratified quantiles: deterministic in the particle index
        idx = np.searchsorted(cdf, (np.arange(n) + 0.5) / n)
        return pts[np.minimum(idx, len(pts) - 1)]

    def to_json(self):
        out = {"kind": self.kind, "mass": self.mass}
        for k in ("mean", "std", "points", "weights", "low", "high"):
            v = getattr(self, k)
            if v is not None:
                out[k] = np.asarray(v).tolist()
        return out


@dataclass
class ParticleMeasure:
    """Weighted particles representing ``rho_t`` at recorded grid indices.

    Attributes:
      times: (R,) recorded times.
      steps: (R,) driver grid indices.
      X: (R, N, d) particle states.
      logw: (R, N) log-weights (zero at t = 0).
      mass: total initial mass ``nu(R^d)``.
    """

    times: np.ndarray
    steps: np.ndarray
    X: np.ndarray
    logw: np.ndarray
    mass: float
    provenance: dict = field(default_factory=dict)

    @property
    def n_particles(self):
        return self.X.shape[1]

    def weights(self, row):
        return np.exp(self.logw[row])

    def pairing(self, f, row):
        """``rho_t(f) = (mass / N) sum_i w_i f(X_i)`` and its standard error."""
        fv = np.asarray(f(self.X[row]) if callable(f) else f, dtype=float)
        mean, se = weighted_mean(fv, self.logw[row])
        return float(self.mass * mean), float(self.mass * se)

    def total_mass(self, row):
        return self.pairing(lambda x: np.ones(x.shape[0]), row)

    def atoms(self, row):
        """Positions and masses ``(mass / N) w_i``."""
        return self.X[row], self.mass * self.weights(row) / self.n_particles

    def row_of(self, t, tol=1e-12):
        hits = np.flatnonzero(np.abs(self.times - t) <= tol * max(1.0, abs(t)))
        if hits.size == 0:
            raise ValueError(f"time {t} was not recorded")
        return int(hits[0])

    def to_csv(self):
        d = self.X.shape[2]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "particle"] + [f"X_{i + 1}" for i in range(d)] + ["w"])
        for r, t in enumerate(self.times):
            w = self.weights(r)
            for i in range(self.n_particles):
                writer.writerow([repr(float(t)), i] + [repr(float(v)) for v in self.X[r, i]] + [repr(float(w[i]))])
        return buf.getvalue()


def forward_measure(coeffs, nu, driver, mc=None, steps=None):
    """Weighted-particle solution of the forward equation from ``nu``.

    Args:
      nu: InitialMeasure.
      steps: grid indices to record (default all).
    """
    mc = mc or MCParams()
    n = driver.n_steps
    steps = np.arange(n + 1) if steps is None else np.asarray(steps, dtype=int)
    root = as_stream(int(mc.seed)).spawn("forward")
    x0 = nu.sample(root.spawn("initial"), int(mc.particles), coeffs.dim)
    tr = simulate(coeffs.numeric, driver, x0, root.spawn("paths"), mc, start=0, record=steps)
    prov = {"particles": int(mc.particles), "seed": int(mc.seed), "refine": int(mc.refine),
            "driver": _driver_id(driver), "coefficients": coeffs.name, "nu": nu.to_json()}
    return ParticleMeasure(driver.times[steps], steps, tr.X, tr.logw, float(nu.mass), prov)


def density_driver(driver, i):
    """Driver of the adjoint problem on ``[0, t_i]``: the restricted path reversed and negated."""
    return driver.restrict(0, i).reverse().negate()


def forward_density(coeffs, p0, driver, space, steps=None, mc=None):
    """Density ``p_t`` of the forward solution started from ``p0 dx``.

    For each ``t = t_i`` the adjoint backward problem with terminal datum ``p0``
    is solved on ``[0, t_i]`` along ``density_driver(driver, i)``.
    """
    mc = mc or MCParams()
    adj = coeffs.adjoint()
    if coeffs.smoothness < 6:
        warnings.warn("forward densities assume smoother coefficients than declared", UserWarning, stacklevel=2)
    n = driver.n_steps
    steps = np.arange(n + 1) if steps is None else np.asarray(steps, dtype=int)
    pts = space.points()
    M, N = pts.shape[0], int(mc.particles)
    pf = as_function(p0.expr if isinstance(p0, ExpDecayFunction) else p0, coeffs.dim)
    root = as_stream(int(mc.seed)).spawn("density")
    vals = np.empty((steps.size, M))
    ses = np.empty((steps.size, M))
    x0 = np.repeat(pts, N, axis=0)
    ids = np.tile(np.arange(N), M) if mc.crn else np.arange(M * N)
    for row, i in enumerate(steps):
        if i == 0:
            vals[row], ses[row] = pf(pts), 0.0
            continue
        drv = density_driver(driver, int(i))
        tr = simulate(adj.numeric, drv, x0, root.spawn(int(i)), mc, start=0, particle_ids=ids)
        mean, se = weighted_mean(pf(tr.X[-1]).reshape(M, N), tr.logw[-1].reshape(M, N))
        vals[row], ses[row] = mean, se
    prov = {"particles": N, "seed": int(mc.seed), "crn": bool(mc.crn), "refine": int(mc.refine),
            "driver": _driver_id(driver), "coefficients": adj.name}
    return BackwardField(driver.times[steps], steps, space, vals, ses, prov)
