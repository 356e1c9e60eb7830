"""RDE solvers: second-order Davie scheme, flows, Jacobians, joint lift, rough SDEs.

Vector-field arrays are batched over points:
``V(x)`` is (N, d, e) with column k the field ``V_k``;
``DV(x)`` is (N, d, d, e) with ``DV[n, i, j, k] = d_j V_k^i``;
``D2V(x)`` is (N, d, d, d, e) with ``D2V[n, i, j, m, k] = d_m d_j V_k^i``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .roughpath import GeometricRoughPath, chen_fold
from .streams import as_stream


class SolverError(FloatingPointError):
    pass


class SmoothnessWarning(UserWarning):
    pass


def _zero_drift(x):
    return np.zeros_like(x)


@dataclass(frozen=True, eq=False)
class VectorFieldSet:
    """Driving fields ``V_1..V_e`` and drift ``b`` on ``R^d``.

    Attributes:
      dim_state: d.
      dim_driver: e.
      V, DV, D2V: batched evaluators (see module docstring); D2V optional.
      b, Db: drift and its Jacobian, (N, d) and (N, d, d).
      smoothness: integer k of the C^k_b tag.
    """

    dim_state: int
    dim_driver: int
    V: Callable
    DV: Callable
    D2V: Optional[Callable] = None
    b: Callable = _zero_drift
    Db: Optional[Callable] = None
    smoothness: int = 3

    @classmethod
    def linear(cls, A, b_aff=None, drift=None):
        """Fields ``V_k(z) = A_k z + b_k``.

        Args:
          A: (e, d, d) matrices.
          b_aff: (e, d) offsets or None.
          drift: optional (d, d) matrix for a linear drift ``b(z) = D z``.
        """
        A = np.asarray(A, dtype=float)
        if A.ndim == 2:
            A = A[None]
        e, d, _ = A.shape
        off = np.zeros((e, d)) if b_aff is None else np.asarray(b_aff, dtype=float).reshape(e, d)
        Dm = np.zeros((d, d)) if drift is None else np.asarray(drift, dtype=float)
        At = np.transpose(A, (1, 2, 0))

        def V(x):
            return np.einsum("kij,nj->nik", A, x) + off.T[None]

        def DV(x):
            return np.broadcast_to(At, (x.shape[0], d, d, e))

        def D2V(x):
            return np.zeros((x.shape[0], d, d, d, e))

        return cls(d, e, V, DV, D2V, lambda x: x @ Dm.T,
                   lambda x: np.broadcast_to(Dm, (x.shape[0], d, d)), smoothness=99)

    def drift_jacobian(self, x):
        if self.Db is not None:
            return self.Db(x)
        return _fd_jacobian(self.b, x)

    def check_derivatives(self, points, step=1e-5, rtol=1e-3):
        """Worst relative mismatch of DV, D2V and Db against central differences."""
        x = np.atleast_2d(np.asarray(points, dtype=float))
        worst = 0.0
        checks = [(lambda y: self.V(y), self.DV(x))]
        if self.D2V is not None:
            checks.append((lambda y: self.DV(y), self.D2V(x)))
        if self.Db is not None:
            checks.append((lambda y: self.b(y), self.Db(x)))
        for f, analytic in checks:
            numeric = _fd_jacobian(f, x, step)
            # numeric carries the differentiation axis last; move it to position 2
            numeric = np.moveaxis(numeric, -1, 2)
            scale = np.maximum(np.abs(analytic), 1.0)
            worst = max(worst, float((np.abs(numeric - analytic) / scale).max(initial=0.0)))
        if worst > rtol:
            raise ValueError(f"derivative evaluators inconsistent with finite differences: {worst:.2e}")
        return worst


def _fd_jacobian(f, x, step=1e-5):
    """Central differences, differentiation axis appended last."""
    d = x.shape[1]
    cols = []
    for j in range(d):
        dx = np.zeros_like(x)
        dx[:, j] = step
        cols.append((np.asarray(f(x + dx)) - np.asarray(f(x - dx))) / (2 * step))
    return np.stack(cols, axis=-1)


def davie_step(fields, x, dt, inc, area):
    """One Davie step ``x + b dt + V(x) W + sum_{k,l} (DV_k V_l)(x) WW^{l,k}``.

    Args:
      x: (N, d) states.
      dt: step length.
      inc: (e,) or (N, e) increments.
      area: (e, e) or (N, e, e) areas.
    """
    V = fields.V(x)
    DV = fields.DV(x)
    inc = np.broadcast_to(inc, (x.shape[0], V.shape[2]))
    area = np.broadcast_to(area, (x.shape[0],) + V.shape[2:] * 2)
    out = x + dt * fields.b(x) + np.einsum("nik,nk->ni", V, inc)
    out += np.einsum("nijk,njl,nlk->ni", DV, V, area)
    return out


def _check_smoothness(fields, needed, what):
    if fields.smoothness < needed:
        warnings.warn(f"{what} assumes C^{needed}_b fields, got tag C^{fields.smoothness}_b",
                      SmoothnessWarning, stacklevel=3)


def _guard(x, k, t):
    if not np.all(np.isfinite(x)):
        raise SolverError(f"non-finite state at step {k} (t={t:.6g})")


@dataclass
class StatePath:
    """Solution samples ``X`` of shape (n+1, d) or (n+1, N, d) on ``times``."""

    times: np.ndarray
    X: np.ndarray

    def to_csv(self):
        X = self.X if self.X.ndim == 2 else self.X[:, 0]
        d = X.shape[1]
        lines = [",".join(["t"] + [f"X_{i + 1}" for i in range(d)])]
        for t, x in zip(self.times, X):
            lines.append(",".join([repr(float(t))] + [repr(float(v)) for v in x]))
        return "\n".join(lines) + "\n"


def _driver_arrays(driver):
    if isinstance(driver, JointLift):
        return driver.grid, driver.z_increments, driver.z_areas
    return driver.grid, driver.increments, driver.areas


def solve_rde(fields, driver, x0):
    """Davie scheme along a rough path or joint lift.

    Args:
      fields: VectorFieldSet with ``dim_driver`` equal to the driver dimension.
      driver: GeometricRoughPath or JointLift.
      x0: (d,) start point, or (N, d) for a batch.

    Returns:
      StatePath, with X of shape (n+1, d) for a single start point.
    """
    _check_smoothness(fields, 3, "the second-order Davie scheme")
    grid, incs, areas = _driver_arrays(driver)
    if incs.shape[-1] != fields.dim_driver:
        raise ValueError(f"driver has dimension {incs.shape[-1]}, fields expect {fields.dim_driver}")
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    x = np.atleast_2d(x0).copy()
    out = np.empty((grid.n_steps + 1,) + x.shape)
    out[0] = x
    dts = grid.dt
    for k in range(grid.n_steps):
        with np.errstate(all="ignore"):
            x = davie_step(fields, x, dts[k], incs[k], areas[k])
        _guard(x, k, grid.times[k + 1])
        out[k + 1] = x
    return StatePath(grid.times, out[:, 0] if single else out)


def solve_linear_rde(A, b_aff, driver, x0, drift=None):
    """Davie scheme for the linear fields ``V_k(z) = A_k z + b_k``."""
    return solve_rde(VectorFieldSet.linear(A, b_aff, drift), driver, x0)


def _jacobian_step(fields, x, J, dt, inc, area):
    V, DV, D2V = fields.V(x), fields.DV(x), fields.D2V(x)
    n, d, e = V.shape
    inc = np.broadcast_to(inc, (n, e))
    area = np.broadcast_to(area, (n, e, e))
    K = dt * fields.drift_jacobian(x) + np.einsum("nijk,nk->nij", DV, inc)
    K += np.einsum("nijmk,nml,nlk->nij", D2V, V, area)
    K += np.einsum("nipk,npjl,nlk->nij", DV, DV, area)
    return J + K @ J


@dataclass
class FlowSample:
    """Flow ``Phi_{0,t}(x)`` with Jacobians, plus the inverse flow of the end map.

    Attributes:
      times: driver grid.
      points: (M, d) start points.
      phi: (n+1, M, d) flow values.
      jacobian: (n+1, M, d, d).
      inverse: (M, d) the inverse flow evaluated at ``phi[-1]``.
    """

    times: np.ndarray
    points: np.ndarray
    phi: np.ndarray
    jacobian: np.ndarray
    inverse: Optional[np.ndarray] = None

    @property
    def determinant(self):
        return np.linalg.det(self.jacobian)


def solve_flow(fields, driver, points, inverse=True):
    """Flow and Jacobian via the augmented system ``(V(x), DV(x) J)``.

    The inverse of the end map is obtained by solving along the reversed
    driver with drift ``-b`` starting from ``Phi_{0,T}(points)``.
    """
    _check_smoothness(fields, 3, "flow Jacobians")
    if fields.D2V is None:
        raise ValueError("solve_flow needs second derivatives of the fields")
    grid, incs, areas = _driver_arrays(driver)
    x = np.atleast_2d(np.asarray(points, dtype=float)).copy()
    m, d = x.shape
    J = np.broadcast_to(np.eye(d), (m, d, d)).copy()
    phi = np.empty((grid.n_steps + 1, m, d))
    jac = np.empty((grid.n_steps + 1, m, d, d))
    phi[0], jac[0] = x, J
    dts = grid.dt
    for k in range(grid.n_steps):
        with np.errstate(all="ignore"):
            J = _jacobian_step(fields, x, J, dts[k], incs[k], areas[k])
            x = davie_step(fields, x, dts[k], incs[k], areas[k])
        _guard(x, k, grid.times[k + 1])
        phi[k + 1], jac[k + 1] = x, J
    inv = None
    if inverse:
        if isinstance(driver, JointLift):
            raise ValueError("inverse flows are computed for deterministic drivers only")
        back = VectorFieldSet(fields.dim_state, fields.dim_driver, fields.V, fields.DV, fields.D2V,
                              lambda y: -fields.b(y), None, fields.smoothness)
        inv = solve_rde(back, driver.reverse(), phi[-1]).X[-1]
    return FlowSample(grid.times, np.asarray(points, dtype=float).reshape(m, d), phi, jac, inv)


def divergence_integral(fields, driver, path_X):
    """``int div V_k(X) dW^k + int div b(X) dr`` along a solution, per grid time.

    ``div V_k(X)`` is integrated as a controlled path with Gubinelli
    derivative ``D(div V_k)(X) V_l(X)``; the drift part uses left points.

    Args:
      path_X: (n+1, M, d) states.

    Returns:
      (n+1, M) running integrals.
    """
    grid, incs, areas = _driver_arrays(driver)
    n1, m, d = path_X.shape
    flat = path_X.reshape(-1, d)
    V = fields.V(flat)
    div = np.einsum("niik->nk", fields.DV(flat))
    ddiv = np.einsum("niimk->nmk", fields.D2V(flat))
    yprime = np.einsum("nmk,nml->nkl", ddiv, V)
    Db = fields.drift_jacobian(flat)
    divb = np.einsum("nii->n", Db)
    e = V.shape[2]
    div, yprime, divb = div.reshape(n1, m, e), yprime.reshape(n1, m, e, e), divb.reshape(n1, m)
    inc = np.broadcast_to(incs[:, None] if incs.ndim == 2 else incs, (n1 - 1, m, e))
    area = np.broadcast_to(areas[:, None] if areas.ndim == 3 else areas, (n1 - 1, m, e, e))
    steps = (np.einsum("nmk,nmk->nm", div[:-1], inc) + np.einsum("nmkl,nmlk->nm", yprime[:-1], area)
             + divb[:-1] * grid.dt[:, None])
    out = np.zeros((n1, m))
    np.cumsum(steps, axis=0, out=out[1:])
    return out


def det_jacobian(flow, fields, driver):
    """Determinant path by Liouville's formula, ``exp`` of the divergence integral.

    Returns:
      (n+1, M) array; compare with ``flow.determinant``.
    """
    direct = flow.determinant
    if np.any(np.abs(direct) < 1e-300):
        raise SolverError("singular Jacobian along the flow")
    return np.exp(divergence_integral(fields, driver, flow.phi))


@dataclass(frozen=True, eq=False)
class JointLift:
    """Joint lift ``Z = (B, W)`` of a Brownian motion and a rough path.

    Blocks per step: ``ito = int B dB`` (Ito, left point),
    ``bw = int B (x) dW``, ``wb = int W (x) dB`` and the areas of ``W``.
    Component order in ``Z`` is Brownian first.
    """

    base: GeometricRoughPath
    b_increments: np.ndarray
    ito: np.ndarray
    bw: np.ndarray
    wb: np.ndarray

    @property
    def grid(self):
        return self.base.grid

    @property
    def m(self):
        return self.b_increments.shape[-1]

    @property
    def z_increments(self):
        return np.concatenate([self.b_increments, self.base.increments], axis=-1)

    @property
    def z_areas(self):
        top = np.concatenate([self.ito, self.bw], axis=-1)
        bottom = np.concatenate([self.wb, self.base.areas], axis=-1)
        return np.concatenate([top, bottom], axis=-2)

    def increment(self, i, j):
        return chen_fold(self.z_increments[i:j], self.z_areas[i:j])

    def ibp_residual(self):
        """``max |(W (x) B - (int B (x) dW)^T) - int W (x) dB|`` over steps.

        Evaluated in this order it is exactly zero when ``wb`` was fixed by
        integration by parts.
        """
        outer = self.base.increments[:, :, None] * self.b_increments[:, None, :]
        return float(np.abs((outer - np.swapaxes(self.bw, 1, 2)) - self.wb).max(initial=0.0))


def joint_blocks(w_inc, w_area, dt, z, refine):
    """Joint-lift blocks for a batch of Brownian samples.

    Args:
      w_inc: (n, e) increments of the rough path.
      w_area: (n, e, e) its areas.
      dt: (n,) step lengths.
      z: (..., n, r, m) standard normals.
      refine: sub-steps r per grid step.

    Returns:
      (dB, ito, bw, wb) with shapes (..., n, m), (..., n, m, m), (..., n, m, e), (..., n, e, m).
    """
    dz = z * np.sqrt(dt / refine)[:, None, None]
    dB = dz.sum(axis=-2)
    left = np.cumsum(dz, axis=-2) - dz
    ito = np.einsum("...ri,...rj->...ij", left, dz)
    bw = left.sum(axis=-2)[..., :, None] * (w_inc / refine)[..., None, :]
    outer = w_inc[:, :, None] * dB[..., None, :]
    wb = outer - np.swapaxes(bw, -1, -2)
    return dB, ito, bw, wb


def build_joint_lift(w, rng, m, refine=16):
    """Joint lift of ``w`` with an independent m-dimensional Brownian motion.

    ``int B dB`` uses Ito left-point sums on ``refine`` sub-steps,
    ``int B (x) dW`` left-point sums against the linear interpolant of ``W``,
    and ``int W (x) dB`` is fixed by integration by parts.
    """
    rng = as_stream(rng)
    n, r = w.n_steps, int(refine)
    z = np.asarray(rng.normal((n, r, m)), dtype=float).reshape(n, r, m)
    dB, ito, bw, wb = joint_blocks(w.increments, w.areas, w.grid.dt, z, r)
    return JointLift(w, dB, ito, bw, wb)


def solve_rough_sde(fields, m, w, rng, x0, particles=1, refine=16, jacobian=False):
    """Rough SDE ``dX = b dt + sigma dB + beta dW`` solved along joint lifts.

    Args:
      fields: VectorFieldSet on the driver ``(B, W)`` (first m columns Brownian).
      m: Brownian dimension.
      w: GeometricRoughPath.
      rng: root stream; particle ``i`` uses ``rng.spawn(i)``, so any particle is
        reproducible from (seed, index) alone.
      x0: (d,) start point.
      particles: number of particles.
      jacobian: also return Jacobians of ``x0 -> X_t``.

    Returns:
      StatePath with X of shape (n+1, particles, d), and Jacobians if requested.
    """
    rng = as_stream(rng)
    n, r = w.n_steps, int(refine)
    z = rng.normal_for(np.arange(particles), n * r * m).reshape(particles, n, r, m)
    dB, ito, bw, wb = joint_blocks(w.increments, w.areas, w.grid.dt, z, r)
    e = w.dim
    incs = np.concatenate([np.moveaxis(dB, 1, 0), np.broadcast_to(w.increments[:, None], (n, particles, e))], -1)
    top = np.concatenate([ito, bw], -1)
    bottom = np.concatenate([wb, np.broadcast_to(w.areas[None], (particles, n, e, e))], -1)
    areas = np.moveaxis(np.concatenate([top, bottom], -2), 1, 0)
    x = np.broadcast_to(np.asarray(x0, dtype=float), (particles, fields.dim_state)).copy()
    out = np.empty((n + 1, particles, fields.dim_state))
    out[0] = x
    J = np.broadcast_to(np.eye(fields.dim_state), (particles,) + (fields.dim_state,) * 2).copy()
    jacs = [J] if jacobian else None
    for k in range(n):
        with np.errstate(all="ignore"):
            if jacobian:
                J = _jacobian_step(fields, x, J, w.grid.dt[k], incs[k], areas[k])
                jacs.append(J)
            x = davie_step(fields, x, w.grid.dt[k], incs[k], areas[k])
        _guard(x, k, w.times[k + 1])
        out[k + 1] = x
    sp = StatePath(w.times, out)
    return (sp, np.stack(jacs)) if jacobian else sp
