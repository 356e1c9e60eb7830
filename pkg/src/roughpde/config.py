"""Scenario configuration: JSON loading, validation and presets.

A scenario file has the sections ``coefficients``, ``driver``, ``grids``,
``mc``, ``tests`` and ``tolerances`` plus optional ``terminal``, ``initial``,
``solution``, ``rde`` and ``wong_zakai`` blocks.  Validation errors carry the
offending field path (and the line for malformed JSON).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import sympy as sp

from .coefficients import OperatorCoefficients
from .feynman_kac import InitialMeasure, SpaceGrid, exp_decay_family, gaussian_family
from .montecarlo import MCParams
from .reference import SmoothDriver, schauder_path
from .roughpath import GeometricRoughPath, Grid, brownian_lift, pure_area_path
from .streams import RandomStream

SECTIONS = ("coefficients", "driver", "grids", "mc", "tests", "tolerances")
OPTIONAL = ("name", "terminal", "initial", "solution", "rde", "wong_zakai", "output", "description")
DRIVER_KINDS = ("smooth", "brownian", "pure-area", "file", "schauder")
SOLUTIONS = ("closed-form", "monte-carlo", "finite-difference")


class ConfigError(ValueError):
    """Invalid scenario; ``where`` is a field path or ``line N``."""

    def __init__(self, where, message):
        super().__init__(f"{where}: {message}")
        self.where = where


PRESETS = {
    "transport": dict(dim=1, beta=[["1"]], gamma=["0.3"], c="-0.2"),
    "heat": dict(dim=1, sigma=[["1"]]),
    "ou-zakai": dict(dim=1, sigma=[["1"]], b=["-x/2"], c="-0.1", beta=[["0.5"]], gamma=["0.3*sin(x)"]),
    "multiplicative": dict(dim=1, sigma=[["0.6*(1 + 0.3*cos(x))"]], b=["-x"], beta=[["0.4*cos(x)"]],
                           gamma=["0.2"]),
    "two-driver": dict(dim=1, sigma=[["0.8"]], b=["-x/2"], c="-0.2*exp(-x**2)",
                       beta=[["0.5", "0.3*sin(x)"]], gamma=["0", "0.2*cos(x)"]),
    "nonlinear-transport": dict(dim=1, sigma=[["0.5"]], b=["-x/2"], beta=[["0.6*cos(x) + 0.3"]],
                                gamma=["0.3*sin(x)"]),
}

DEFAULT_TOLERANCES = {"weak": None, "duality_factor": 4.0, "interpolation": 1e-3, "tail": 1e-8}


def _positive(value, where, allow_none=False, integer=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(where, f"expected a number, got {value!r}")
    if not np.isfinite(value) or value <= 0:
        raise ConfigError(where, f"must be positive, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(where, f"must be an integer, got {value!r}")
    return int(value) if integer else float(value)


def _require(mapping, key, where):
    if not isinstance(mapping, dict):
        raise ConfigError(where, "expected an object")
    if key not in mapping:
        raise ConfigError(f"{where}.{key}" if where else key, "missing")
    return mapping[key]


@dataclass
class ScenarioConfig:
    """Validated scenario.

    Attributes:
      raw: the JSON document after defaults were merged.
      base_dir: directory used to resolve relative file paths.
    """

    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    # ---- construction ------------------------------------------------

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read: {exc.strerror}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}", f"malformed JSON ({exc.msg}, column {exc.colno})") from exc
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw, base_dir=None):
        cfg = cls(copy.deepcopy(raw), Path(base_dir) if base_dir is not None else Path.cwd())
        cfg.validate()
        return cfg

    def with_overrides(self, seed=None, threads=None):
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw.setdefault("mc", {})["seed"] = int(seed)
        if threads is not None:
            raw.setdefault("mc", {})["threads"] = int(threads)
        return ScenarioConfig.from_dict(raw, self.base_dir)

    # ---- validation --------------------------------------------------

    def validate(self):
        raw = self.raw
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "expected a JSON object")
        for key in raw:
            if key not in SECTIONS + OPTIONAL:
                raise ConfigError(key, "unknown section")
        for key in SECTIONS:
            _require(raw, key, "")
        self._validate_tolerances()
        coeffs = self.coefficients()
        grids = raw["grids"]
        _positive(_require(grids, "T", "grids"), "grids.T")
        _positive(_require(grids, "steps", "grids"), "grids.steps", integer=True)
        n = int(grids["steps"])
        every = _positive(grids.get("record_every", n), "grids.record_every", integer=True)
        if n % every:
            raise ConfigError("grids.record_every", f"must divide steps={n}")
        space = _require(grids, "space", "grids")
        _positive(_require(space, "half_width", "grids.space"), "grids.space.half_width")
        _positive(_require(space, "points", "grids.space"), "grids.space.points", integer=True)
        self.mc_params()
        drv = raw["driver"]
        kind = _require(drv, "kind", "driver")
        if kind not in DRIVER_KINDS:
            raise ConfigError("driver.kind", f"unknown kind {kind!r}; expected one of {DRIVER_KINDS}")
        alpha = drv.get("alpha", 0.45 if kind in ("brownian", "schauder") else 0.5)
        if not 1 / 3 < float(alpha) <= 0.5:
            raise ConfigError("driver.alpha", f"must lie in (1/3, 1/2], got {alpha}")
        if kind == "smooth":
            exprs = _require(drv, "expr", "driver")
            if not isinstance(exprs, list) or not exprs:
                raise ConfigError("driver.expr", "expected a non-empty list of expressions in t")
        if kind == "file":
            path = self.base_dir / _require(drv, "path", "driver")
            if not path.exists():
                raise ConfigError("driver.path", f"file {path} does not exist")
        if kind == "pure-area":
            gen = np.asarray(_require(drv, "generator", "driver"), dtype=float)
            if gen.ndim != 2 or gen.shape[0] != gen.shape[1] or not np.allclose(gen, -gen.T):
                raise ConfigError("driver.generator", "expected an antisymmetric square matrix")
        if kind != "file" and coeffs.e and self.driver_dim() != coeffs.e:
            raise ConfigError("driver", f"driver dimension {self.driver_dim()} does not match beta columns {coeffs.e}")
        sol = raw.get("solution", {})
        backward = sol.get("backward", "monte-carlo")
        if backward not in SOLUTIONS:
            raise ConfigError("solution.backward", f"unknown solver {backward!r}; expected one of {SOLUTIONS}")
        forward = sol.get("forward", "monte-carlo")
        if forward not in ("closed-form", "monte-carlo"):
            raise ConfigError("solution.forward", f"unknown solver {forward!r}")
        if backward == "finite-difference" and kind != "smooth":
            raise ConfigError("solution.backward", "finite differences need a smooth driver")
        self._validate_tests()
        if "initial" in raw:
            self.initial_measure()
        if "terminal" in raw:
            self._expr(raw["terminal"], "terminal")
        if "rde" in raw:
            x0 = _require(raw["rde"], "x0", "rde")
            if np.asarray(x0, dtype=float).reshape(-1).size != coeffs.dim:
                raise ConfigError("rde.x0", f"expected {coeffs.dim} coordinates")
        if "wong_zakai" in raw:
            wz = raw["wong_zakai"]
            levels = _require(wz, "levels", "wong_zakai")
            if not levels or any(2 ** int(lv) > n or n % 2 ** int(lv) for lv in levels):
                raise ConfigError("wong_zakai.levels", f"each 2**level must divide steps={n}")
            _positive(wz.get("seeds", 1), "wong_zakai.seeds", integer=True)

    def _validate_tolerances(self):
        tol = self.raw["tolerances"]
        if not isinstance(tol, dict):
            raise ConfigError("tolerances", "expected an object")
        for key, value in tol.items():
            if key not in DEFAULT_TOLERANCES:
                raise ConfigError(f"tolerances.{key}", "unknown tolerance")
            _positive(value, f"tolerances.{key}", allow_none=key == "weak")

    def _validate_tests(self):
        tests = self.raw["tests"]
        if not isinstance(tests, dict):
            raise ConfigError("tests", "expected an object")
        for key, family in tests.items():
            if key not in ("backward", "forward"):
                raise ConfigError(f"tests.{key}", "unknown test block; expected backward or forward")
            name = _require(family, "family", f"tests.{key}")
            if name not in ("exp-decay", "gaussian"):
                raise ConfigError(f"tests.{key}.family", f"unknown family {name!r}")
            _positive(family.get("count", 4), f"tests.{key}.count", integer=True)

    def _expr(self, value, where):
        try:
            return sp.sympify(value, locals={"x": sp.Symbol("x1", real=True)})
        except (sp.SympifyError, TypeError, SyntaxError) as exc:
            raise ConfigError(where, f"cannot parse expression {value!r}") from exc

    # ---- typed accessors ---------------------------------------------

    @property
    def name(self):
        return self.raw.get("name", "scenario")

    def coefficients(self):
        entry = self.raw["coefficients"]
        if not isinstance(entry, dict):
            raise ConfigError("coefficients", "expected an object")
        if "preset" in entry:
            preset = entry["preset"]
            if preset not in PRESETS:
                raise ConfigError("coefficients.preset", f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
            args = {**PRESETS[preset], **{k: v for k, v in entry.items() if k != "preset"}}
            name = preset
        else:
            args = dict(entry)
            name = args.pop("name", "custom")
        if "dim" not in args:
            raise ConfigError("coefficients.dim", "missing")
        allowed = {"dim", "sigma", "b", "c", "beta", "gamma", "smoothness"}
        for key in args:
            if key not in allowed:
                raise ConfigError(f"coefficients.{key}", "unknown field")
        try:
            return OperatorCoefficients(name=name, **args)
        except (ValueError, TypeError, sp.SympifyError, SyntaxError) as exc:
            raise ConfigError("coefficients", str(exc)) from exc

    def driver_dim(self):
        drv = self.raw["driver"]
        kind = drv["kind"]
        if kind == "smooth":
            return len(drv["expr"])
        if kind == "pure-area":
            return len(drv["generator"])
        if kind == "schauder":
            return 1
        return int(drv.get("dim", max(self.coefficients().e, 1)))

    @property
    def alpha(self):
        drv = self.raw["driver"]
        return float(drv.get("alpha", 0.45 if drv["kind"] in ("brownian", "schauder") else 0.5))

    def grid(self):
        g = self.raw["grids"]
        return Grid.uniform(float(g["T"]), int(g["steps"]))

    def record_steps(self):
        g = self.raw["grids"]
        n = int(g["steps"])
        return np.arange(0, n + 1, int(g.get("record_every", n)))

    def space(self):
        s = self.raw["grids"]["space"]
        return SpaceGrid(self.coefficients().dim, float(s["half_width"]), int(s["points"]))

    def mc_params(self, which="forward"):
        """MCParams; ``which="backward"`` uses ``mc.field_particles`` per field point when given."""
        entry = dict(self.raw["mc"])
        for key in entry:
            if key not in ("particles", "field_particles", "seed", "refine", "block", "threads", "crn"):
                raise ConfigError(f"mc.{key}", "unknown field")
        field_particles = entry.pop("field_particles", None)
        if field_particles is not None:
            _positive(field_particles, "mc.field_particles", integer=True)
            if which == "backward":
                entry["particles"] = field_particles
        for key in ("particles", "refine", "block", "threads"):
            if key in entry:
                _positive(entry[key], f"mc.{key}", integer=True)
        seed = entry.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("mc.seed", f"must be an unsigned 64-bit integer, got {seed!r}")
        try:
            return MCParams(**entry)
        except ValueError as exc:
            raise ConfigError("mc", str(exc)) from exc

    @property
    def seed(self):
        return int(self.raw["mc"].get("seed", 0))

    def smooth_driver(self):
        """SmoothDriver for ``kind = smooth`` (expressions in ``t``)."""
        drv = self.raw["driver"]
        t = sp.Symbol("t", real=True)
        exprs = [sp.sympify(e, locals={"t": t}) for e in drv["expr"]]
        f = sp.lambdify(t, exprs, "numpy")
        df = sp.lambdify(t, [sp.diff(e, t) for e in exprs], "numpy")

        def func(s):
            s = np.atleast_1d(np.asarray(s, dtype=float))
            return np.stack([np.broadcast_to(v, s.shape) for v in f(s)], axis=1)

        def deriv(s):
            s = np.atleast_1d(np.asarray(s, dtype=float))
            return np.stack([np.broadcast_to(v, s.shape) for v in df(s)], axis=1)

        return SmoothDriver(func, deriv, self.grid().times, name=f"smooth({', '.join(drv['expr'])})")

    def driver_seed(self):
        """Seed of a random driver: explicit ``driver.seed`` or derived from ``mc.seed``."""
        drv = self.raw["driver"]
        return int(drv["seed"]) if "seed" in drv else self.seed

    def build_driver(self):
        """GeometricRoughPath on the scenario grid."""
        drv = self.raw["driver"]
        kind, grid, alpha = drv["kind"], self.grid(), self.alpha
        if kind == "smooth":
            return self.smooth_driver().lift(grid, alpha)
        if kind == "brownian":
            stream = RandomStream(self.driver_seed()).spawn("driver")
            return brownian_lift(stream, grid, self.driver_dim(), alpha=alpha, refine=int(drv.get("refine", 16)))
        if kind == "schauder":
            depth = int(drv.get("depth", int(np.log2(grid.n_steps))))
            return schauder_path(grid, depth, RandomStream(self.driver_seed()), alpha)
        if kind == "pure-area":
            return pure_area_path(grid, np.asarray(drv["generator"], dtype=float)).with_alpha(alpha)
        path = self.base_dir / drv["path"]
        try:
            w = GeometricRoughPath.from_csv(path.read_text(), alpha=alpha)
        except (ValueError, KeyError) as exc:
            raise ConfigError("driver.path", f"cannot read rough path: {exc}") from exc
        if w.n_steps != grid.n_steps or not np.allclose(w.times, grid.times):
            raise ConfigError("driver.path", "file grid does not match grids.T/grids.steps")
        return w

    def terminal(self):
        return self.raw.get("terminal", "exp(-x1**2/2)")

    def initial_measure(self):
        entry = dict(self.raw.get("initial", {"kind": "gaussian", "mean": [0.0], "std": [1.0]}))
        try:
            return InitialMeasure(**entry)
        except (TypeError, ValueError) as exc:
            raise ConfigError("initial", str(exc)) from exc

    def test_functions(self, which):
        d = self.coefficients().dim
        entry = self.raw["tests"].get(which)
        if entry is None:
            entry = {"family": "exp-decay" if which == "backward" else "gaussian"}
        count = int(entry.get("count", 4))
        if entry["family"] == "exp-decay":
            fam = exp_decay_family(d, count, scale=float(entry.get("scale", 0.5)))
            return fam if which == "backward" else [f.expr for f in fam]
        fam = gaussian_family(d, count, width=float(entry.get("width", 1.5)))
        if which == "backward":
            from .feynman_kac import ExpDecayFunction
            return [ExpDecayFunction(f, d, order=3, name=f"gaussian[{i}]") for i, f in enumerate(fam)]
        return fam

    def tolerances(self):
        return {**DEFAULT_TOLERANCES, **self.raw["tolerances"]}

    def solution(self, which):
        return self.raw.get("solution", {}).get(which, "monte-carlo")

    def to_json(self):
        return copy.deepcopy(self.raw)
