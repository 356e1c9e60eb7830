"""Scenario pipeline: lift, solve, verify, and write the artifact bundle."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .coefficients import OperatorCoefficients
from .config import ConfigError, ScenarioConfig
from .feynman_kac import backward_field, forward_measure
from .reference import fd_backward_solve, transport_field, transport_measure, wong_zakai_study
from .rde import solve_rde
from .verify import QuadratureError, check_duality, check_weak_backward, check_weak_forward

STAGES = ("lift", "solve-rde", "solve-backward", "solve-forward", "check-weak", "check-duality", "wong-zakai")
C1B_NORM = "max(sup|f|, sup|Df|) <= 1"


@dataclass
class ScenarioResult:
    """Outcome of a pipeline run.

    Attributes:
      checks: check name -> {"passed": bool, ...details}.
      files: written file names relative to the output directory.
      manifest: the manifest document.
    """

    checks: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks.values())

    @property
    def exit_code(self):
        return 0 if self.passed else 1


def _csv_to_json(text):
    rows = list(csv.reader(io.StringIO(text)))
    cols = rows[0]
    data = [[float(v) for v in r] for r in rows[1:]]
    return json.dumps({"columns": cols, "rows": data}, separators=(",", ":"))


def _versions():
    import matplotlib
    import scipy
    import sympy
    return {"roughpde": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "sympy": sympy.__version__, "matplotlib": matplotlib.__version__}


def required_stages(cfg, command):
    """Stages executed for a CLI subcommand."""
    tests = cfg.raw["tests"]
    if command == "run":
        chosen = ["lift", "solve-backward", "solve-forward", "check-weak", "check-duality"]
        if "rde" in cfg.raw:
            chosen.insert(1, "solve-rde")
        if "wong_zakai" in cfg.raw:
            chosen.append("wong-zakai")
        return chosen
    if command == "lift":
        return ["lift"]
    if command == "solve-rde":
        if "rde" not in cfg.raw:
            raise ConfigError("rde", "missing (needed by solve-rde)")
        return ["lift", "solve-rde"]
    if command in ("solve-backward", "solve-forward"):
        return ["lift", command]
    if command == "check-weak":
        out = ["lift"]
        if "backward" in tests:
            out.append("solve-backward")
        if "forward" in tests:
            out.append("solve-forward")
        return out + ["check-weak"]
    if command == "check-duality":
        return ["lift", "solve-backward", "solve-forward", "check-duality"]
    if command == "wong-zakai":
        if "wong_zakai" not in cfg.raw:
            raise ConfigError("wong_zakai", "missing (needed by wong-zakai)")
        return ["lift", "wong-zakai"]
    raise ValueError(f"unknown command {command!r}")


class _Bundle:
    def __init__(self, out, fmt, figures):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.fmt = fmt
        self.figures = figures
        self.files = []

    def table(self, stem, csv_text):
        name = f"{stem}.{self.fmt}"
        text = csv_text if self.fmt == "csv" else _csv_to_json(csv_text)
        (self.out / name).write_text(text)
        self.files.append(name)

    def document(self, stem, obj):
        name = f"{stem}.json"
        (self.out / name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
        self.files.append(name)

    def figure(self, stem, fn, *args):
        if not self.figures:
            return
        name = f"{stem}.png"
        fn(*args, self.out / name)
        self.files.append(name)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return str(obj)


def _rde_fields(coeffs):
    """Rough vector fields ``beta`` with drift ``b`` (no Brownian part)."""
    sub = OperatorCoefficients(coeffs.dim, b=list(coeffs.b), beta=coeffs.beta.tolist() if coeffs.e else None,
                               smoothness=coeffs.smoothness, name=f"rde({coeffs.name})")
    return sub.vector_fields()


def run_scenario(cfg, out, command="run", fmt="csv", figures=True):
    """Execute the stages of ``command`` for ``cfg`` and write the bundle to ``out``.

    Args:
      cfg: ScenarioConfig.
      out: output directory.
      command: CLI subcommand name (``run`` executes every applicable stage).
      fmt: ``"csv"`` or ``"json"`` for tabular outputs.
      figures: write PNG figures next to the tables.

    Returns:
      ScenarioResult.
    """
    from . import plotting

    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    stages = required_stages(cfg, command)
    bundle = _Bundle(out, fmt, figures)
    result = ScenarioResult()
    coeffs = cfg.coefficients()
    mc = cfg.mc_params()
    tol = cfg.tolerances()
    steps = cfg.record_steps()
    space = cfg.space()
    driver = cfg.build_driver()
    if coeffs.e and driver.dim != coeffs.e:
        raise ConfigError("driver", f"driver dimension {driver.dim} does not match beta columns {coeffs.e}")
    u = rho = None
    reports = {}

    if "lift" in stages:
        bundle.table("driver", driver.to_csv())
        bundle.figure("driver", plotting.plot_driver, driver)
        resid = driver.geometricity_residual()
        result.checks["driver_geometric"] = {"passed": bool(resid <= 1e-12), "residual": float(resid)}

    if "solve-rde" in stages:
        x0 = np.asarray(cfg.raw["rde"]["x0"], dtype=float)
        sol = solve_rde(_rde_fields(coeffs), driver, x0)
        bundle.table("rde", sol.to_csv())
        finite = bool(np.all(np.isfinite(sol.X)))
        result.checks["rde_finite"] = {"passed": finite}

    if "solve-backward" in stages:
        kind = cfg.solution("backward")
        g = cfg.terminal()
        if kind == "closed-form":
            u = transport_field(coeffs, g, driver, space, steps)
        elif kind == "finite-difference":
            fd = fd_backward_solve(coeffs, g, cfg.smooth_driver(), space, n_time=driver.n_steps,
                                   boundary=cfg.raw["solution"].get("boundary", "extrapolate"))
            u = type(fd)(fd.times[steps], steps, space, fd.values[steps], fd.std_error[steps], fd.provenance)
        else:
            u = backward_field(coeffs, g, driver, space, steps, cfg.mc_params("backward"))
        bundle.table("backward_field", u.to_csv())
        bundle.figure("backward_field", plotting.plot_field, u)

    if "solve-forward" in stages:
        nu = cfg.initial_measure()
        if cfg.solution("forward") == "closed-form":
            rho = transport_measure(coeffs, nu, driver, mc.particles, mc.seed, steps)
        else:
            rho = forward_measure(coeffs, nu, driver, mc, steps)
        bundle.table("forward_measure", rho.to_csv())
        bundle.figure("forward_measure", plotting.plot_measure, rho)

    if "check-weak" in stages:
        if u is not None and "backward" in cfg.raw["tests"]:
            particles = None if cfg.solution("backward") != "monte-carlo" else cfg.mc_params("backward").particles
            try:
                rep = check_weak_backward(u, coeffs, driver, cfg.test_functions("backward"), tol=tol["weak"],
                                          tail_tol=tol["tail"], particles=particles)
                reports["backward"] = rep
                result.checks["weak_backward"] = {"passed": rep.passed, "worst": rep.worst,
                                                  "tolerance": rep.tolerance}
            except QuadratureError as exc:
                result.checks["weak_backward"] = {"passed": False, "error": str(exc)}
        if rho is not None and "forward" in cfg.raw["tests"]:
            rep = check_weak_forward(rho, coeffs, driver, cfg.test_functions("forward"), tol=tol["weak"])
            reports["forward"] = rep
            result.checks["weak_forward"] = {"passed": rep.passed, "worst": rep.worst, "tolerance": rep.tolerance}
        bundle.document("weak", {k: r.to_json() for k, r in reports.items()})
        if reports:
            bundle.figure("weak", plotting.plot_residuals, reports)

    if "check-duality" in stages:
        rep = check_duality(u, rho, factor=tol["duality_factor"], atol=tol["interpolation"])
        bundle.document("duality", rep.to_json())
        bundle.figure("duality", plotting.plot_duality, rep)
        result.checks["duality"] = {"passed": rep.passed, "sup_gap": rep.sup_gap,
                                    "max_std_error": float(rep.std_errors.max())}

    if "wong-zakai" in stages:
        wz = cfg.raw["wong_zakai"]
        table = wong_zakai_study(driver, [int(v) for v in wz["levels"]], coeffs, cfg.terminal(),
                                 cfg.initial_measure(), space, mc, seeds=range(int(wz.get("seeds", 1))),
                                 field_steps=np.asarray(wz.get("field_steps", [0])),
                                 kr_steps=np.asarray(wz.get("kr_steps", [driver.n_steps])))
        bundle.table("wong_zakai", table.to_csv())
        bundle.figure("wong_zakai", plotting.plot_convergence, table)
        ok = {k: table.is_decreasing(k) for k in ("metric", "field_gap", "kr_gap")}
        result.checks["wong_zakai_monotone"] = {"passed": all(ok.values()), **ok}

    manifest = {
        "scenario": cfg.name,
        "command": command,
        "stages": stages,
        "seeds": {"mc": int(mc.seed), "driver": cfg.driver_seed()},
        "grids": {"time": driver.grid.to_json(), "record_steps": steps.tolist(), "space": space.to_json()},
        "driver": driver.manifest(kind=cfg.raw["driver"]["kind"]),
        "coefficients": coeffs.to_json(),
        "mc": {"forward": mc.to_json(), "backward": cfg.mc_params("backward").to_json()},
        "tolerances": tol,
        "kr_norm": C1B_NORM,
        "versions": _versions(),
        "config": cfg.to_json(),
        "checks": result.checks,
        "files": {name: hashlib.sha256((bundle.out / name).read_bytes()).hexdigest()
                  for name in bundle.files if not name.endswith(".png")},
    }
    bundle.document("manifest", manifest)
    summary = {"scenario": cfg.name, "command": command, "passed": result.passed,
               "exit_code": result.exit_code, "checks": {k: v["passed"] for k, v in result.checks.items()}}
    bundle.document("summary", summary)
    result.files = bundle.files
    result.manifest = manifest
    return result


def load_and_run(path, out, command="run", seed=None, threads=None, fmt="csv", figures=True):
    cfg = ScenarioConfig.load(path).with_overrides(seed=seed, threads=threads)
    return run_scenario(cfg, out, command, fmt, figures)
