"""Symbolic operator coefficients ``(sigma, b, c, beta, gamma)``.

``L u = 1/2 tr(sigma sigma^T D^2 u) + <b, Du> + c u`` and
``Gamma_k u = <beta_k, Du> + gamma_k u``.  Expressions are sympy objects in
the state variables ``x1..xd``; derivatives and adjoints are exact, numeric
evaluators are compiled with ``lambdify`` and batched over points (N, d).
"""

from __future__ import annotations

import functools

import numpy as np
import sympy as sp
from sympy.core.function import AppliedUndef

from .rde import VectorFieldSet


class MissingDerivative(ValueError):
    pass


def state_symbols(d):
    return sp.symbols(f"x1:{d + 1}", real=True)


def _namespace(syms):
    ns = {str(s): s for s in syms}
    aliases = ["x", "y", "z"]
    for name, s in zip(aliases, syms):
        ns.setdefault(name, s)
    return ns


def parse(expr, syms):
    """Sympify a string or number in the state variables."""
    if isinstance(expr, sp.Basic):
        return expr
    if isinstance(expr, (int, float)):
        return sp.nsimplify(expr) if float(expr).is_integer() else sp.Float(expr)
    return sp.sympify(expr, locals=_namespace(syms))


def _check_differentiable(expr):
    if expr.atoms(AppliedUndef) or expr.has(sp.Derivative):
        raise MissingDerivative(f"no derivative evaluator for {expr}")


def compile_array(exprs, syms):
    """Batched numeric evaluator of an array of expressions.

    Returns a function mapping (N, d) points to (N, *shape).
    """
    arr = np.array(exprs, dtype=object)
    shape = arr.shape
    flat = [sp.sympify(e) for e in arr.ravel()]
    consts = [float(e) if e.is_number else None for e in flat]
    funcs = [None if c is not None else sp.lambdify(syms, e, "numpy") for e, c in zip(flat, consts)]
    d = len(syms)

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        x = x.reshape(-1, d)
        cols = [x[:, i] for i in range(d)]
        out = np.empty((x.shape[0], len(flat)))
        for j, (fn, c) in enumerate(zip(funcs, consts)):
            out[:, j] = c if fn is None else fn(*cols)
        return out.reshape((x.shape[0],) + shape)

    return evaluate


def _grad(expr, syms):
    _check_differentiable(expr)
    return [sp.diff(expr, s) for s in syms]


class OperatorCoefficients:
    """Fields ``sigma`` (d x m), ``b`` (d), ``c``, ``beta`` (d x e), ``gamma`` (e).

    Args:
      dim: state dimension d.
      sigma, b, c, beta, gamma: expressions (sympy objects, strings or numbers)
        in ``x1..xd`` (``x``, ``y``, ``z`` are accepted aliases).
      smoothness: integer C^k_b tag declared by the caller.
      name: identifier written to manifests.
    """

    def __init__(self, dim, sigma=None, b=None, c=0, beta=None, gamma=None, smoothness=7, name="custom"):
        self.dim = d = int(dim)
        self.syms = syms = state_symbols(d)
        p = functools.partial(parse, syms=syms)
        self.sigma = sp.Matrix(d, 0, []) if sigma is None else sp.Matrix([[p(v) for v in row] for row in _rows(sigma, d)])
        self.beta = sp.Matrix(d, 0, []) if beta is None else sp.Matrix([[p(v) for v in row] for row in _rows(beta, d)])
        self.b = sp.Matrix([p(v) for v in (b if b is not None else [0] * d)])
        self.c = p(c)
        e = self.beta.shape[1]
        self.gamma = sp.Matrix([p(v) for v in (gamma if gamma is not None else [0] * e)])
        if self.gamma.shape[0] != e:
            raise ValueError(f"gamma has {self.gamma.shape[0]} entries, beta has {e} columns")
        if self.b.shape[0] != d:
            raise ValueError(f"drift has {self.b.shape[0]} entries for dimension {d}")
        self.smoothness = int(smoothness)
        self.name = name

    def __repr__(self):
        return f"OperatorCoefficients({self.name!r}, d={self.dim}, m={self.m}, e={self.e})"

    @property
    def m(self):
        return self.sigma.shape[1]

    @property
    def e(self):
        return self.beta.shape[1]

    @property
    def diffusion(self):
        """``a = sigma sigma^T``."""
        return self.sigma * self.sigma.T

    def to_json(self):
        s = sp.sstr
        return {"name": self.name, "dim": self.dim,
                "sigma": [[s(v) for v in self.sigma.row(i)] for i in range(self.dim)],
                "b": [s(v) for v in self.b], "c": s(self.c),
                "beta": [[s(v) for v in self.beta.row(i)] for i in range(self.dim)],
                "gamma": [s(v) for v in self.gamma], "smoothness": self.smoothness}

    # ---- symbolic operators -------------------------------------------

    def apply_generator(self, f):
        """``L f`` as a sympy expression."""
        f = parse(f, self.syms)
        _check_differentiable(f)
        a = self.diffusion
        x = self.syms
        out = self.c * f
        for i in range(self.dim):
            out += self.b[i] * sp.diff(f, x[i])
            for j in range(self.dim):
                if a[i, j] != 0:
                    out += sp.Rational(1, 2) * a[i, j] * sp.diff(f, x[i], x[j])
        return out

    def apply_transport(self, k, f):
        """``Gamma_k f`` as a sympy expression."""
        f = parse(f, self.syms)
        _check_differentiable(f)
        return self.gamma[k] * f + sum((self.beta[i, k] * sp.diff(f, self.syms[i]) for i in range(self.dim)),
                                       sp.Integer(0))

    def adjoint(self):
        """Coefficients of the formal adjoints ``L*`` and ``Gamma*_k``.

        ``a~ = a`` (carried by the same sigma), ``b~_i = d_j a_ji - b_i``,
        ``c~ = 1/2 d_ij a_ij - div b + c``, ``beta~ = -beta``,
        ``gamma~_k = -div beta_k + gamma_k``.
        """
        x, d = self.syms, self.dim
        a = self.diffusion
        for expr in list(a) + list(self.b) + list(self.beta):
            _check_differentiable(expr)
        b_new = [sum((sp.diff(a[j, i], x[j]) for j in range(d)), sp.Integer(0)) - self.b[i] for i in range(d)]
        c_new = (sp.Rational(1, 2) * sum((sp.diff(a[i, j], x[i], x[j]) for i in range(d) for j in range(d)),
                                         sp.Integer(0))
                 - sum((sp.diff(self.b[i], x[i]) for i in range(d)), sp.Integer(0)) + self.c)
        gamma_new = [-sum((sp.diff(self.beta[i, k], x[i]) for i in range(d)), sp.Integer(0)) + self.gamma[k]
                     for k in range(self.e)]
        return OperatorCoefficients(
            d, sigma=self.sigma.tolist() if self.m else None, b=[sp.simplify(v) for v in b_new],
            c=sp.simplify(c_new), beta=(-self.beta).tolist() if self.e else None,
            gamma=[sp.simplify(v) for v in gamma_new], smoothness=max(self.smoothness - 2, 0),
            name=f"adjoint({self.name})")

    # ---- numeric evaluators -------------------------------------------

    @functools.cached_property
    def numeric(self):
        return NumericCoefficients(self)

    def vector_fields(self):
        """VectorFieldSet for the rough SDE with driver ``(B, W)``, Brownian columns first."""
        return self.numeric.fields


def _rows(matrix, d):
    rows = matrix if isinstance(matrix, (list, tuple)) else sp.Matrix(matrix).tolist()
    rows = [list(r) if isinstance(r, (list, tuple)) else [r] for r in rows]
    if len(rows) != d:
        raise ValueError(f"matrix has {len(rows)} rows for dimension {d}")
    return rows


class NumericCoefficients:
    """Compiled evaluators; arrays are batched over the leading point axis."""

    def __init__(self, coeffs):
        x, d = coeffs.syms, coeffs.dim
        V = sp.Matrix.hstack(coeffs.sigma, coeffs.beta) if (coeffs.m + coeffs.e) else sp.zeros(d, 0)
        n_fields = V.shape[1]
        for expr in list(V) + list(coeffs.b) + list(coeffs.gamma) + [coeffs.c]:
            _check_differentiable(expr)
        dV = [[[sp.diff(V[i, k], x[j]) for k in range(n_fields)] for j in range(d)] for i in range(d)]
        d2V = [[[[sp.diff(V[i, k], x[j], x[mm]) for k in range(n_fields)] for mm in range(d)]
                 for j in range(d)] for i in range(d)]
        db = [[sp.diff(coeffs.b[i], x[j]) for j in range(d)] for i in range(d)]
        dgamma = [[sp.diff(coeffs.gamma[k], x[j]) for j in range(d)] for k in range(coeffs.e)]
        self.m, self.e, self.dim = coeffs.m, coeffs.e, d
        self.V = compile_array(V.tolist() if n_fields else np.zeros((d, 0)), x)
        self.DV = compile_array(dV if n_fields else np.zeros((d, d, 0)), x)
        self.D2V = compile_array(d2V if n_fields else np.zeros((d, d, d, 0)), x)
        self.b = compile_array(list(coeffs.b), x)
        self.Db = compile_array(db, x)
        self.c = compile_array(coeffs.c, x)
        self.gamma = compile_array(list(coeffs.gamma) if coeffs.e else np.zeros(0), x)
        self.Dgamma = compile_array(dgamma if coeffs.e else np.zeros((0, d)), x)
        self.fields = VectorFieldSet(d, n_fields, self.V, self.DV, self.D2V, self.b, self.Db,
                                     smoothness=coeffs.smoothness)
        self.c_is_zero = coeffs.c == 0
        self.gamma_is_zero = all(g == 0 for g in coeffs.gamma)


def compile_scalar(expr, syms):
    """Evaluator of one scalar expression, (N, d) -> (N,)."""
    return compile_array(parse(expr, syms), syms)
