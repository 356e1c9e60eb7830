"""Controlled paths and their rough integrals.

Shapes: ``values`` is (n+1, *S) and ``deriv`` is (n+1, *S, e), the trailing
axis running over driver components, so ``Y_{s,t} ~ deriv_s @ W_{s,t}``.
A scalar-valued path against a one-dimensional driver may pass ``values``
of shape (n+1,) and ``deriv`` of shape (n+1,).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .roughpath import GeometricRoughPath, GridError


class ReferenceMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ControlledPath:
    """Pair ``(Y, Y')`` controlled by ``reference``."""

    reference: GeometricRoughPath
    values: np.ndarray
    deriv: np.ndarray

    def __post_init__(self):
        n1, e = self.reference.n_steps + 1, self.reference.dim
        y = np.array(self.values, dtype=float)
        d = np.array(self.deriv, dtype=float)
        if y.shape[:1] != (n1,):
            raise GridError(f"values have {y.shape[0]} samples, reference grid has {n1}")
        if d.shape == y.shape and e == 1:
            d = d[..., None]
        if d.shape != y.shape + (e,):
            raise ValueError(f"deriv shape {d.shape} does not match values {y.shape} + ({e},)")
        y.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "values", y)
        object.__setattr__(self, "deriv", d)

    @property
    def alpha(self):
        return self.reference.alpha

    @property
    def shape(self):
        return self.values.shape[1:]

    @classmethod
    def of_path(cls, path):
        """The driver itself, ``(W, I)``."""
        e = path.dim
        return cls(path, path.values(), np.broadcast_to(np.eye(e), (path.n_steps + 1, e, e)))

    @classmethod
    def constant(cls, path, value):
        value = np.asarray(value, dtype=float)
        vals = np.broadcast_to(value, (path.n_steps + 1,) + value.shape)
        return cls(path, vals, np.zeros(vals.shape + (path.dim,)))

    def remainder_from(self, i, stop=None):
        """``R_{t_i, t_j}`` for ``j = i+1..stop``."""
        w, _ = self.reference.increments_from(i, stop)
        stop = self.reference.n_steps if stop is None else min(stop, self.reference.n_steps)
        dy = self.values[i + 1:stop + 1] - self.values[i]
        return dy - np.einsum("...e,je->j...", self.deriv[i], w)


def _same_reference(a, b):
    if a.reference is b.reference:
        return
    ra, rb = a.reference, b.reference
    if (ra.n_steps != rb.n_steps or not np.array_equal(ra.times, rb.times)
            or not np.array_equal(ra.increments, rb.increments)
            or not np.array_equal(ra.areas, rb.areas)):
        raise ReferenceMismatch("controlled paths refer to different rough paths")


def compensated_sum(values, deriv, increments, areas, outer=False):
    """Compensated Riemann sum terms, one per step (not yet summed).

    Args:
      values: (n, *S) left-point integrand values.
      deriv: (n, *S, e) left-point Gubinelli derivatives.
      increments: (n, e).
      areas: (n, e, e) with ``areas[:, l, k] = int W^l dW^k``.
      outer: if False the last axis of S is contracted with the driver
        (``int Y dW``); if True the integral is ``int Y (x) dW``.

    Returns:
      (n, *S') array of step contributions.
    """
    if outer:
        return (values[..., None] * increments.reshape((-1,) + (1,) * (values.ndim - 1) + increments.shape[1:])
                + np.einsum("n...l,nlk->n...k", deriv, areas))
    return np.einsum("n...k,nk->n...", values, increments) + np.einsum("n...kl,nlk->n...", deriv, areas)


@dataclass
class ConvergenceReport:
    """Compensated sums on the full grid and on the 2x and 4x coarsened grids."""

    sums: list
    meshes: list
    differences: list = field(default_factory=list)
    observed_order: float = float("nan")

    def to_json(self):
        def conv(x):
            x = np.asarray(x)
            return x.tolist() if x.ndim else float(x)
        return {"sums": [conv(s) for s in self.sums], "meshes": [float(m) for m in self.meshes],
                "differences": [float(d) for d in self.differences],
                "observed_order": None if np.isnan(self.observed_order) else float(self.observed_order)}


def _prepare(y, outer):
    vals, der = y.values, y.deriv
    if not outer:
        e = y.reference.dim
        if vals.ndim == 1 and e == 1:
            vals, der = vals[:, None], der[:, None, :]
        if vals.shape[-1] != e:
            raise ValueError(f"integrand last axis {vals.shape[1:]} cannot be contracted with driver dim {e}")
    return vals, der


def _sum_on(path, vals, der, idx, outer):
    incs, areas = zip(*(path.increment(a, b) for a, b in zip(idx[:-1], idx[1:])))
    return compensated_sum(vals[idx[:-1]], der[idx[:-1]], np.array(incs), np.array(areas), outer).sum(axis=0)


def rough_integral(y, interval=None, outer=False):
    """Rough integral of a controlled path over ``[s, t]``.

    Args:
      y: ControlledPath.
      interval: ``(s, t)`` grid times; defaults to the full grid.
      outer: integrate ``Y (x) dW`` instead of the contraction ``Y dW``.

    Returns:
      (value, ConvergenceReport); the report compares the full-grid sum with
      the sums on the 2x and 4x coarsened grids.
    """
    path = y.reference
    grid = path.grid
    i, j = (0, path.n_steps) if interval is None else (grid.index(interval[0]), grid.index(interval[1]))
    if j < i:
        raise GridError("interval end precedes its start")
    vals, der = _prepare(y, outer)
    if i == j:
        zero = compensated_sum(vals[:1], der[:1], np.zeros((1, path.dim)), np.zeros((1, path.dim, path.dim)), outer)[0]
        return zero, ConvergenceReport([zero], [0.0])
    sums, meshes, last = [], [], None
    for factor in (1, 2, 4):
        idx = np.arange(i, j + 1, factor)
        if idx[-1] != j:
            idx = np.append(idx, j)
        if idx.size == last:
            break
        last = idx.size
        sums.append(_sum_on(path, vals, der, idx, outer))
        meshes.append(float(np.diff(path.times[idx]).max()))
    diffs = [float(np.max(np.abs(a - b))) for a, b in zip(sums[:-1], sums[1:])]
    order = float("nan")
    if len(diffs) == 2 and diffs[0] > 0 and diffs[1] > 0:
        order = float(np.log2(diffs[1] / diffs[0]))
    return sums[0], ConvergenceReport(sums, meshes, diffs, order)


def cumulative_integral(y, outer=False):
    """Running compensated sums ``int_0^{t_k} Y dW`` for every grid index k."""
    path = y.reference
    vals, der = _prepare(y, outer)
    steps = compensated_sum(vals[:-1], der[:-1], path.increments, path.areas, outer)
    out = np.zeros((path.n_steps + 1,) + steps.shape[1:])
    np.cumsum(steps, axis=0, out=out[1:])
    return out


def dyadic_decay_order(y, levels=6, outer=False):
    """Fitted order of ``|S_{2^j} - S_{2^{j+1}}|`` against the mesh of the coarser grid.

    Returns:
      (order, meshes, differences).
    """
    path = y.reference
    vals, der = _prepare(y, outer)
    n = path.n_steps
    sums, meshes = [], []
    for j in range(levels + 1):
        idx = np.arange(0, n + 1, 2**j)
        if idx[-1] != n:
            idx = np.append(idx, n)
        if idx.size < 2:
            break
        sums.append(_sum_on(path, vals, der, idx, outer))
        meshes.append(float(np.diff(path.times[idx]).max()))
    diffs = np.array([np.max(np.abs(a - b)) for a, b in zip(sums[:-1], sums[1:])])
    h = np.array(meshes[1:])
    keep = diffs > 0
    if keep.sum() < 2:
        return float("inf"), h, diffs
    slope = np.polyfit(np.log(h[keep]), np.log(diffs[keep]), 1)[0]
    return float(slope), h, diffs


def product(a, b):
    """Pointwise product ``(A B, A' B + A B')`` of two controlled paths."""
    _same_reference(a, b)
    va, vb = np.broadcast_arrays(a.values, b.values)
    vals = va * vb
    der = a.deriv * vb[..., None] + va[..., None] * b.deriv
    return ControlledPath(a.reference, vals, der)


def compose_smooth(phi, dphi, y):
    """``(phi(Y), D phi(Y) Y')``.

    Args:
      phi: maps the (n+1, *S) values array pointwise.
      dphi: Jacobian; for scalar Y it returns phi' at each value, for vector
        Y of shape (n+1, d) it returns (n+1, *P, d). A componentwise phi may
        return its derivatives in the shape of Y instead (diagonal Jacobian).
    """
    vals = np.asarray(phi(y.values), dtype=float)
    jac = np.asarray(dphi(y.values), dtype=float)
    if y.values.ndim == 1 or (jac.shape == y.values.shape and vals.shape == y.values.shape):
        der = jac[..., None] * y.deriv
    else:
        jac = np.broadcast_to(jac, vals.shape + y.values.shape[1:])
        der = np.einsum("n...d,nde->n...e", jac, y.deriv)
    return ControlledPath(y.reference, vals, der)


def time_reverse(y):
    """``(Y_{T-.}, Y'_{T-.})`` controlled by the reversed driver."""
    return ControlledPath(y.reference.reverse(), y.values[::-1], y.deriv[::-1])


def controlled_norm(y, max_lag=None):
    """Grid estimates ``(||Y'||_alpha, ||R^Y||_{2 alpha})`` over pairs in [0, T].

    The seminorm ``||Y, Y'||_{W, alpha}`` is their sum.
    """
    path = y.reference
    a, n, t = path.alpha, path.n_steps, path.times
    s = y.values.ndim - 1
    d_norm = r_norm = 0.0
    for i in range(n):
        stop = n if max_lag is None else min(n, i + max_lag)
        dt = t[i + 1:stop + 1] - t[i]
        dd = (y.deriv[i + 1:stop + 1] - y.deriv[i]).reshape(dt.size, -1)
        rem = y.remainder_from(i, stop).reshape(dt.size, -1) if s else y.remainder_from(i, stop)[:, None]
        d_norm = max(d_norm, float((np.linalg.norm(dd, axis=1) / dt**a).max()))
        r_norm = max(r_norm, float((np.linalg.norm(rem, axis=1) / dt**(2 * a)).max()))
    return d_norm, r_norm
