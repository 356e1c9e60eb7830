"""Smooth-driver reference solvers and the Wong-Zakai harness.

The finite-difference solvers are oracles for C^1 drivers only.  Each time
step is a Strang splitting: Crank-Nicolson half steps for ``L`` around a
transport step ``exp(dW^k Gamma_k)`` evaluated by a fourth-order Taylor
polynomial of the central-difference operator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .feynman_kac import BackwardField, ParticleMeasure, as_function, backward_field, forward_measure
from .montecarlo import MCParams, weighted_mean
from .roughpath import Grid, lift_piecewise_linear, lift_smooth
from .streams import as_stream

TRANSPORT_CFL = 2.5


class FDStabilityError(ValueError):
    pass


@dataclass
class SmoothDriver:
    """C^1 path ``W`` with derivative, sampled on a fine grid.

    Attributes:
      func: callable, times (k,) -> values (k, e).
      deriv: callable, times (k,) -> derivatives (k, e).
      times: fine sampling grid (defines T).
      name: identifier for manifests.
    """

    func: object
    deriv: object
    times: np.ndarray
    name: str = "smooth"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)

    @property
    def T(self):
        return float(self.times[-1])

    def values(self, t):
        v = np.asarray(self.func(np.asarray(t, dtype=float)), dtype=float)
        return v.reshape(np.size(t), -1)

    def derivative(self, t):
        v = np.asarray(self.deriv(np.asarray(t, dtype=float)), dtype=float)
        return v.reshape(np.size(t), -1)

    @property
    def dim(self):
        return self.values(self.times[:1]).shape[1]

    def lift(self, grid=None, alpha=0.5):
        """Canonical lift on ``grid`` (default: the sampling grid)."""
        return lift_smooth(self.func, self.deriv, Grid(self.times) if grid is None else grid, alpha)

    def check(self, rtol=1e-2):
        """Derivative against centred difference quotients of the samples."""
        t = self.times
        v = self.values(t)
        dq = (v[2:] - v[:-2]) / (t[2:] - t[:-2])[:, None]
        dv = self.derivative(t[1:-1])
        scale = max(1.0, float(np.abs(dv).max()))
        err = float(np.abs(dq - dv).max()) / scale
        h = float(np.diff(t).max())
        if err > rtol + 10 * h:
            raise ValueError(f"derivative inconsistent with difference quotients: {err:.2e}")
        return err

    @classmethod
    def linear(cls, T=1.0, n=1024, slope=1.0):
        s = np.atleast_1d(np.asarray(slope, dtype=float))
        return cls(lambda t: np.outer(t, s), lambda t: np.outer(np.ones_like(t), s),
                   np.linspace(0.0, T, n + 1), name=f"linear({s.tolist()})")

    @classmethod
    def piecewise_linear(cls, knots, values, fine_times, name="piecewise-linear"):
        """Linear interpolant of ``values`` at ``knots``; the derivative is the right slope."""
        knots = np.asarray(knots, dtype=float)
        vals = np.asarray(values, dtype=float).reshape(knots.size, -1)
        slopes = np.diff(vals, axis=0) / np.diff(knots)[:, None]

        def func(t):
            t = np.atleast_1d(t)
            return np.stack([np.interp(t, knots, vals[:, j]) for j in range(vals.shape[1])], axis=1)

        def deriv(t):
            t = np.atleast_1d(t)
            k = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, knots.size - 2)
            return slopes[k]

        return cls(func, deriv, fine_times, name)


# ---- finite differences ------------------------------------------------


def _prolongation_1d(n, boundary):
    """Map interior values (n-2) to all n nodes."""
    rows, cols, vals = list(range(1, n - 1)), list(range(n - 2)), [1.0] * (n - 2)
    if boundary == "extrapolate":
        # quadratic extrapolation u_0 = 3 u_1 - 3 u_2 + u_3
        for node, src in ((0, (0, 1, 2)), (n - 1, (n - 3, n - 4, n - 5))):
            rows += [node] * 3
            cols += list(src)
            vals += [3.0, -3.0, 1.0]
    elif boundary != "dirichlet":
        raise ValueError(f"unknown boundary mode {boundary!r}")
    return sps.csr_matrix((vals, (rows, cols)), shape=(n, n - 2))


def _diff_1d(n, h):
    e = np.ones(n)
    d1 = sps.diags([-e[:-1], e[:-1]], [-1, 1], shape=(n, n)) / (2 * h)
    d2 = sps.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1], shape=(n, n)) / h**2
    return d1.tocsr(), d2.tocsr()


class _Operators:
    """Interior-node operators for ``L`` and ``Gamma_k`` on a SpaceGrid."""

    def __init__(self, coeffs, space, boundary):
        d, n, h = space.dim, space.points_per_axis, space.h
        if d not in (1, 2):
            raise ValueError("finite-difference oracles support d = 1 or 2")
        self.space, self.d = space, d
        p1 = _prolongation_1d(n, boundary)
        d1, d2 = _diff_1d(n, h)
        eye = sps.identity(n, format="csr")
        if d == 1:
            P, D, DD = p1, [d1], [[d2]]
            inner = np.arange(1, n - 1)
        else:
            P = sps.kron(p1, p1, format="csr")
            D = [sps.kron(d1, eye, format="csr"), sps.kron(eye, d1, format="csr")]
            DD = [[sps.kron(d2, eye, format="csr"), sps.kron(d1, d1, format="csr")],
                  [sps.kron(d1, d1, format="csr"), sps.kron(eye, d2, format="csr")]]
            idx = np.arange(n * n).reshape(n, n)
            inner = idx[1:-1, 1:-1].ravel()
        self.P, self.inner = P, inner
        R = sps.csr_matrix((np.ones(inner.size), (np.arange(inner.size), inner)), shape=(inner.size, n**d))
        x = space.points()[inner]
        num = coeffs.numeric
        sig = num.V(x)[:, :, :num.m]
        a = np.einsum("nik,njk->nij", sig, sig)
        b = num.b(x)
        L = sps.diags(num.c(x))
        for i in range(d):
            L = L + sps.diags(b[:, i]) @ (R @ D[i] @ P)
            for j in range(d):
                if np.any(a[:, i, j]):
                    L = L + sps.diags(0.5 * a[:, i, j]) @ (R @ DD[i][j] @ P)
        self.L = L.tocsc()
        beta = num.V(x)[:, :, num.m:]
        gamma = num.gamma(x)
        self.Gamma = []
        self.beta_max = []
        for k in range(num.e):
            G = sps.diags(gamma[:, k])
            for i in range(d):
                G = G + sps.diags(beta[:, i, k]) @ (R @ D[i] @ P)
            self.Gamma.append(G.tocsr())
            self.beta_max.append(float(np.abs(beta[:, :, k]).max(initial=0.0)))
        self.h = h

    def full(self, interior):
        return self.P @ interior


def _transport(ops, u, dW, dt):
    if not ops.Gamma:
        return u
    cfl = sum(abs(w) * bm for w, bm in zip(dW, ops.beta_max)) / ops.h
    if cfl > TRANSPORT_CFL:
        raise FDStabilityError(
            f"transport CFL {cfl:.2f} exceeds {TRANSPORT_CFL}; use a time step below "
            f"{dt * TRANSPORT_CFL / cfl:.3e}")
    A = sum((w * G for w, G in zip(dW, ops.Gamma) if w != 0), sps.csr_matrix(ops.Gamma[0].shape))
    out, term = u.copy(), u.copy()
    for k in range(1, 5):
        term = A @ term / k
        out += term
    return out


def _fd_solve(coeffs, u0, driver, space, n_time, boundary, backward):
    ops = _Operators(coeffs, space, boundary)
    T = driver.T
    times = np.linspace(0.0, T, int(n_time) + 1)
    dt = T / n_time
    W = driver.values(times)
    ident = sps.identity(ops.L.shape[0], format="csc")
    half = 0.5 * dt
    lhs = spla.splu((ident - 0.5 * half * ops.L).tocsc())
    rhs = (ident + 0.5 * half * ops.L).tocsr()

    def cn_half(v):
        return lhs.solve(rhs @ v)

    out = np.empty((times.size, space.points_per_axis**space.dim))
    v = u0[ops.inner].copy()
    order = range(n_time, 0, -1) if backward else range(n_time)
    out[n_time if backward else 0] = u0
    for k in order:
        lo, hi = (k - 1, k) if backward else (k, k + 1)
        v = cn_half(v)
        v = _transport(ops, v, W[hi] - W[lo], dt)
        v = cn_half(v)
        if not np.all(np.isfinite(v)):
            raise FDStabilityError(f"finite-difference solution blew up at t={times[lo]:.4g}")
        out[lo if backward else hi] = ops.full(v)
    return times, out


def fd_backward_solve(coeffs, g, driver, space, n_time=256, boundary="dirichlet"):
    """Terminal-value problem ``-du/dt = L u + dW^k/dt Gamma_k u``, ``u(T) = g``.

    Args:
      coeffs: OperatorCoefficients (d = 1 or 2).
      g: terminal datum (callable or expression).
      driver: SmoothDriver.
      space: SpaceGrid.
      n_time: number of time steps on [0, T].
      boundary: ``"dirichlet"`` (zero) or ``"extrapolate"``.

    Returns:
      BackwardField on the fd time grid (``std_error`` zero).
    """
    gf = as_function(g, coeffs.dim)
    u_T = gf(space.points())
    times, vals = _fd_solve(coeffs, u_T, driver, space, n_time, boundary, backward=True)
    prov = {"solver": "finite-difference", "boundary": boundary, "L": space.half_width,
            "n_time": int(n_time), "driver": driver.name, "coefficients": coeffs.name}
    return BackwardField(times, np.arange(times.size), space, vals, np.zeros_like(vals), prov)


def fd_forward_solve(coeffs, p0, driver, space, n_time=256, boundary="dirichlet"):
    """Initial-value problem ``dp/dt = L* p + dW^k/dt Gamma*_k p``, ``p(0) = p0``."""
    pf = as_function(getattr(p0, "expr", p0), coeffs.dim)
    adj = coeffs.adjoint()
    times, vals = _fd_solve(adj, pf(space.points()), driver, space, n_time, boundary, backward=False)
    prov = {"solver": "finite-difference", "boundary": boundary, "L": space.half_width,
            "n_time": int(n_time), "driver": driver.name, "coefficients": adj.name}
    return BackwardField(times, np.arange(times.size), space, vals, np.zeros_like(vals), prov)


# ---- classical Feynman-Kac ---------------------------------------------


def classical_fk(coeffs, g, driver, t, x, mc=None, n_steps=256, method="euler"):
    """``E[g(X_T) exp(int c dr + int gamma(X) dW/dr dr)]`` for a C^1 driver.

    ``method="euler"`` runs Euler-Maruyama on ``dX = (b + beta dW/dt) dt + sigma dB``;
    ``method="davie"`` runs the rough solver on the canonical lift.

    Returns:
      (estimate, std_error).
    """
    mc = mc or MCParams()
    if method == "davie":
        from .feynman_kac import backward_value
        grid = Grid(np.linspace(0.0, driver.T, n_steps + 1))
        return backward_value(coeffs, g, t, x, driver.lift(grid), mc)
    if method != "euler":
        raise ValueError(f"unknown method {method!r}")
    gf = as_function(g, coeffs.dim)
    num = coeffs.numeric
    d, m, N = coeffs.dim, num.m, int(mc.particles)
    times = np.linspace(t, driver.T, n_steps + 1)
    dt = times[1] - times[0]
    wdot = driver.derivative(times[:-1]) if num.e else np.zeros((n_steps, 0))
    stream = as_stream(int(mc.seed)).spawn("classical")
    X = np.broadcast_to(np.asarray(x, dtype=float).reshape(1, d), (N, d)).copy()
    logw = np.zeros(N)
    z = stream.normal_for(np.arange(N), n_steps * m).reshape(N, n_steps, m) if m else None
    for k in range(n_steps):
        V = num.V(X)
        drift = num.b(X) + (np.einsum("nik,k->ni", V[:, :, m:], wdot[k]) if num.e else 0.0)
        logw += num.c(X) * dt + (num.gamma(X) @ wdot[k] * dt if num.e else 0.0)
        step = drift * dt
        if m:
            step = step + np.einsum("nik,nk->ni", V[:, :, :m], z[:, k]) * np.sqrt(dt)
        X = X + step
    mean, se = weighted_mean(gf(X), logw)
    return float(mean), float(se)


# ---- closed-form transport ---------------------------------------------


def _transport_constants(coeffs):
    """``(b, beta, c, gamma)`` as floats; requires sigma = 0 and constant coefficients."""
    if coeffs.m:
        raise ValueError("closed-form transport needs sigma = 0")
    exprs = list(coeffs.b) + list(coeffs.beta) + list(coeffs.gamma) + [coeffs.c]
    if not all(e.is_number for e in exprs):
        raise ValueError("closed-form transport needs constant b, beta, c and gamma")
    d, e = coeffs.dim, coeffs.e
    b = np.array([float(v) for v in coeffs.b])
    beta = np.array([[float(coeffs.beta[i, k]) for k in range(e)] for i in range(d)]).reshape(d, e)
    gamma = np.array([float(v) for v in coeffs.gamma])
    return b, beta, float(coeffs.c), gamma


def transport_field(coeffs, g, driver, space, steps=None):
    """Exact ``u(t, x) = g(x + b (T-t) + beta W_{t,T}) exp(c (T-t) + gamma . W_{t,T})``."""
    b, beta, c, gamma = _transport_constants(coeffs)
    gf = as_function(g, coeffs.dim)
    n = driver.n_steps
    steps = np.arange(n + 1) if steps is None else np.asarray(steps, dtype=int)
    W = driver.values()
    pts = space.points()
    vals = np.empty((steps.size, pts.shape[0]))
    for row, i in enumerate(steps):
        dW = W[n] - W[i]
        tau = driver.times[n] - driver.times[i]
        vals[row] = gf(pts + b * tau + beta @ dW) * np.exp(c * tau + gamma @ dW)
    prov = {"solver": "closed-form transport", "coefficients": coeffs.name}
    return BackwardField(driver.times[steps], steps, space, vals, np.zeros_like(vals), prov)


def transport_measure(coeffs, nu, driver, particles, seed=0, steps=None):
    """Exact forward measure: atoms of ``nu`` carried along characteristics."""
    b, beta, c, gamma = _transport_constants(coeffs)
    n = driver.n_steps
    steps = np.arange(n + 1) if steps is None else np.asarray(steps, dtype=int)
    x0 = nu.sample(as_stream(int(seed)).spawn("forward").spawn("initial"), int(particles), coeffs.dim)
    W = driver.values() - driver.values()[0]
    t = driver.times - driver.times[0]
    X = np.stack([x0 + b * t[i] + beta @ W[i] for i in steps])
    logw = np.stack([np.full(x0.shape[0], c * t[i] + gamma @ W[i]) for i in steps])
    prov = {"solver": "closed-form transport", "particles": int(particles), "seed": int(seed),
            "coefficients": coeffs.name, "nu": nu.to_json()}
    return ParticleMeasure(driver.times[steps], steps, X, logw, float(nu.mass), prov)


# ---- rough path metric and Wong-Zakai ----------------------------------


def rough_metric(a, b, max_lag=None):
    """Inhomogeneous alpha-Holder distance over grid pairs.

    ``max(sup |dW_a - dW_b| / |t-s|^alpha, sup |dWW_a - dWW_b| / |t-s|^{2 alpha})``
    with ``alpha`` taken from ``a``.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.n_steps != b.n_steps or not np.allclose(a.times, b.times, rtol=0, atol=1e-14):
        raise ValueError("paths must share their grid (resample first)")
    alpha, t, n = a.alpha, a.times, a.n_steps
    first = second = 0.0
    for i in range(n):
        stop = n if max_lag is None else min(n, i + max_lag)
        wa, aa = a.increments_from(i, stop)
        wb, ab = b.increments_from(i, stop)
        dt = t[i + 1:stop + 1] - t[i]
        first = max(first, float((np.linalg.norm(wa - wb, axis=1) / dt**alpha).max()))
        second = max(second, float((np.linalg.norm(aa - ab, axis=(1, 2)) / dt**(2 * alpha)).max()))
    return max(first, second)


def dyadic_approximation(target, level):
    """Piecewise-linear interpolation of ``target`` at ``2**level`` equal steps, lifted on the target grid."""
    T = target.grid.T
    knots = np.linspace(0.0, T, 2**level + 1)
    vals = target.values()
    samples = np.stack([np.interp(knots, target.times, vals[:, j]) for j in range(target.dim)], axis=1)
    fine = np.stack([np.interp(target.times, knots, samples[:, j]) for j in range(target.dim)], axis=1)
    return lift_piecewise_linear(fine, target.grid, target.alpha)


def schauder_path(grid, depth, rng=0, alpha=0.4):
    """Brownian-like scalar path: Levy-Ciesielski series with random signs.

    ``W = sum_{j < depth} sum_k s_{jk} 2^{-j/2} H_{jk}`` with Schauder tents
    ``H_{jk}`` of height 1/2 and a linear term ``s t``; the signs are
    Rademacher, so every dyadic level has the same amplitude.
    """
    grid = grid if isinstance(grid, Grid) else Grid(grid)
    stream = as_stream(rng).spawn("schauder")
    t = grid.times / grid.T
    u = stream.uniform(2**depth)
    signs = np.where(u < 0.5, -1.0, 1.0)
    w = signs[0] * t
    pos = 1
    for j in range(depth):
        for k in range(2**j):
            left, width = k / 2**j, 1.0 / 2**j
            tent = np.clip(1.0 - np.abs((t - left) / width * 2.0 - 1.0), 0.0, None) * 0.5
            w = w + signs[pos] * 2.0 ** (-j / 2) * tent
            pos += 1
            if pos >= signs.size:
                break
        if pos >= signs.size:
            break
    w = w * np.sqrt(grid.T)
    return lift_piecewise_linear(w, grid, alpha)


@dataclass
class ConvergenceTable:
    """Rows ``(level, metric, field_gap, kr_gap)`` plus per-seed spreads."""

    rows: list = field(default_factory=list)

    def to_csv(self):
        lines = ["level,metric,field_gap,kr_gap"]
        for r in self.rows:
            lines.append(",".join(repr(float(r[k])) if k != "level" else str(r[k])
                                  for k in ("level", "metric", "field_gap", "kr_gap")))
        return "\n".join(lines) + "\n"

    def to_json(self):
        return json.dumps({"rows": self.rows}, indent=2, sort_keys=True)

    def column(self, key):
        return np.array([r[key] for r in self.rows], dtype=float)

    def seed_noise(self, key):
        """Standard error over seeds of a gap column (zeros for the metric)."""
        out = []
        for r in self.rows:
            per_seed = r.get(f"{key}s")
            out.append(0.0 if not per_seed or len(per_seed) < 2
                       else float(np.std(per_seed, ddof=1) / np.sqrt(len(per_seed))))
        return np.array(out)

    def is_decreasing(self, key, factor=2.0):
        """Every increase between consecutive levels is within ``factor`` x seed noise."""
        vals, noise = self.column(key), self.seed_noise(key)
        slack = factor * np.maximum(noise[1:], noise[:-1])
        return bool(np.all(vals[1:] <= vals[:-1] + slack))


def wong_zakai_study(target, levels, coeffs, g, nu, space, mc=None, seeds=(0,), field_steps=None,
                     kr_steps=None, max_lag=None):
    """Dyadic piecewise-linear approximations of ``target`` versus ``target`` itself.

    For each level: the rough-path distance to the target, the sup-norm gap
    of the backward fields (common random numbers between the two fields) and
    the largest Kantorovich-Rubinstein gap between forward measures.  Gaps are
    averaged over ``seeds``; ``*_spread`` holds their standard deviation.
    """
    from .verify import kr_distance
    mc = mc or MCParams()
    n = target.n_steps
    field_steps = np.array([0, n // 2]) if field_steps is None else np.asarray(field_steps)
    kr_steps = np.array([n // 2, n]) if kr_steps is None else np.asarray(kr_steps)
    table = ConvergenceTable()
    ref_fields, ref_measures = {}, {}
    for seed in seeds:
        p = MCParams(mc.particles, seed, mc.refine, mc.block, mc.threads, True)
        ref_fields[seed] = backward_field(coeffs, g, target, space, field_steps, p)
        ref_measures[seed] = forward_measure(coeffs, nu, target, p, steps=kr_steps)
    for level in levels:
        approx = dyadic_approximation(target, level)
        metric = rough_metric(approx, target, max_lag)
        fgaps, kgaps = [], []
        for seed in seeds:
            p = MCParams(mc.particles, seed, mc.refine, mc.block, mc.threads, True)
            f = backward_field(coeffs, g, approx, space, field_steps, p)
            fgaps.append(float(np.abs(f.values - ref_fields[seed].values).max()))
            rho = forward_measure(coeffs, nu, approx, p, steps=kr_steps)
            ref = ref_measures[seed]
            kgaps.append(max(kr_distance(rho.atoms(r), ref.atoms(r))["value"] for r in range(kr_steps.size)))
        table.rows.append({"level": int(level), "metric": metric,
                           "field_gap": float(np.mean(fgaps)), "kr_gap": float(np.mean(kgaps)),
                           "field_gap_spread": float(np.std(fgaps)), "kr_gap_spread": float(np.std(kgaps)),
                           "field_gaps": fgaps, "kr_gaps": kgaps})
    return table
