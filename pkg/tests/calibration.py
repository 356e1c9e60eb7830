"""Calibration of the residual tolerance constants on closed-form scenarios.

Each scenario isolates one term of ``A h + B N^{-1/2} + C mesh^(3 alpha - 1)``.
Run as a script to print the measured ratios and proposed constants; the
frozen values live in ``roughpde.verify`` and ``test_verify.py`` checks they
still dominate the ratios measured here (with ``fast=True``).
"""

import numpy as np

from roughpde.coefficients import OperatorCoefficients
from roughpde.feynman_kac import BackwardField, InitialMeasure, SpaceGrid, exp_decay_family, forward_measure, \
    gaussian_family
from roughpde.montecarlo import MCParams
from roughpde.roughpath import Grid, brownian_lift, lift_smooth
from roughpde.streams import RandomStream
from roughpde.verify import check_weak_backward, check_weak_forward

SAFETY = 2.0
GAMMA = 0.3
BOX = 25.0


def sine_driver(n, T=1.0):
    return lift_smooth(lambda t: np.sin(2 * t), lambda t: 2 * np.cos(2 * t), Grid.uniform(T, n))


def rough_driver(n, seed=3, alpha=0.45):
    return brownian_lift(RandomStream(seed), Grid.uniform(1.0, n), 1, alpha=alpha)


def transport_coefficients(gamma=GAMMA):
    return OperatorCoefficients(1, beta=[["1"]], gamma=[str(gamma)], name="transport")


def transport_field(driver, space, gamma=GAMMA, steps=None, scale=1.0):
    """Exact ``u(t, x) = g(x + W_T - W_t) exp(gamma (W_T - W_t))`` with ``g = sin``."""
    steps = np.arange(driver.n_steps + 1) if steps is None else np.asarray(steps)
    W = driver.values()[:, 0]
    x = space.points()[:, 0]
    dW = W[-1] - W[steps]
    vals = np.sin(x[None, :] + dW[:, None]) * np.exp(gamma * dW)[:, None]
    vals[:-1] *= scale
    return BackwardField(driver.times[steps], steps, space, vals, np.zeros_like(vals), provenance={"exact": True})


def heat_coefficients():
    return OperatorCoefficients(1, sigma=[["1"]], name="heat")


def heat_field(n, space, T=1.0):
    """Exact ``u(t, x) = cos(x) exp(-(T - t)/2)``."""
    t = np.linspace(0.0, T, n + 1)
    x = space.points()[:, 0]
    vals = np.cos(x)[None, :] * np.exp(-(T - t) / 2)[:, None]
    return BackwardField(t, np.arange(n + 1), space, vals, np.zeros_like(vals), provenance={"exact": True})


def mesh_term(driver, steps=None):
    t = driver.times if steps is None else driver.times[steps]
    return float(np.diff(t).max()) ** (3 * driver.alpha - 1)


def mesh_ratios(fast=False):
    """Residual / mesh^(3 alpha - 1) on deterministic closed-form scenarios."""
    levels = [256, 1024] if fast else [256, 1024, 4096]
    space = SpaceGrid(1, BOX, 1001)
    tests = exp_decay_family(1, 4, scale=0.5)
    coeffs = transport_coefficients()
    out = {}
    for n in levels:
        for kind, drv in (("smooth", sine_driver(n)), ("rough", rough_driver(n))):
            rep = check_weak_backward(transport_field(drv, space), coeffs, drv, tests, tol=np.inf)
            out[f"backward-transport-{kind}-{n}"] = rep.worst / mesh_term(drv)
            nu = InitialMeasure("dirac", mean=[0.3])
            rho = forward_measure(coeffs, nu, drv, MCParams(particles=2), steps=np.arange(n + 1))
            rep = check_weak_forward(rho, coeffs, drv, gaussian_family(1, 4), tol=np.inf)
            out[f"forward-particle-{kind}-{n}"] = rep.worst / mesh_term(drv)
        drv = sine_driver(n)
        rep = check_weak_backward(heat_field(n, space), heat_coefficients(), drv, tests, tol=np.inf)
        out[f"backward-heat-{n}"] = rep.worst / mesh_term(drv)
    return out


def space_ratios(fast=False):
    """Residual / h for the heat field on coarse space grids (mesh term removed)."""
    n = 256
    drv = sine_driver(n)
    tests = exp_decay_family(1, 4, scale=0.5)
    out = {}
    for h in ([0.25, 0.5] if fast else [0.1, 0.25, 0.5]):
        space = SpaceGrid(1, BOX, int(round(2 * BOX / h)) + 1)
        rep = check_weak_backward(heat_field(n, space), heat_coefficients(), drv, tests, tol=np.inf)
        out[f"heat-h{h}"] = rep.worst / h
    return out


def particle_ratios(fast=False):
    """Residual * sqrt(N) for a weighted stochastic forward system."""
    coeffs = OperatorCoefficients(1, sigma=[["1"]], b=["-x/2"], c="-0.1", beta=[["0.5"]], gamma=["0.2"],
                                  name="stochastic")
    nu = InitialMeasure("gaussian", mean=[0.0], std=[0.5])
    out = {}
    n = 256
    drv = rough_driver(n, seed=5)
    for N in ([2000] if fast else [2000, 8000]):
        for seed in range(2 if fast else 4):
            rho = forward_measure(coeffs, nu, drv, MCParams(particles=N, seed=seed), steps=np.arange(0, n + 1, 8))
            rep = check_weak_forward(rho, coeffs, drv, gaussian_family(1, 4), tol=np.inf)
            out[f"stochastic-N{N}-s{seed}"] = rep.worst * np.sqrt(N)
    return out


def proposed_constants(fast=False):
    mesh = mesh_ratios(fast)
    space = space_ratios(fast)
    part = particle_ratios(fast)
    return {"A": SAFETY * max(space.values()), "B": SAFETY * max(part.values()),
            "C": SAFETY * max(mesh.values())}, {**mesh, **space, **part}


if __name__ == "__main__":
    consts, ratios = proposed_constants()
    for k, v in ratios.items():
        print(f"{k:36s} {v:.4g}")
    print({k: float(f"{v:.3g}") for k, v in consts.items()})
