"""Static PNG figures for scenario bundles (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.1,
    "savefig.dpi": 120,
}
# no timestamps or software tags, so reruns write identical files
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return str(path)


def plot_driver(driver, path):
    """Path components and the antisymmetric area accumulated from 0."""
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2)
        vals = driver.values()
        for k in range(driver.dim):
            a1.plot(driver.times, vals[:, k], label=f"W{k + 1}")
        a1.set_xlabel("t")
        a1.set_title("path")
        a1.legend(frameon=False)
        _, areas = driver.increments_from(0, driver.n_steps)
        for i in range(driver.dim):
            for j in range(i + 1, driver.dim):
                lev = 0.5 * (areas[:, i, j] - areas[:, j, i])
                a2.plot(driver.times[1:], lev, label=f"A{i + 1}{j + 1}")
        if driver.dim == 1:
            a2.plot(driver.times[1:], areas[:, 0, 0], label="A11")
        a2.set_xlabel("t")
        a2.set_title("area from 0")
        a2.legend(frameon=False)
        return _save(fig, path)


def plot_field(u, path, label="u"):
    """Field rows (1-d) or the first and last rows as images (2-d)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if u.space.dim == 1:
            x = u.space.axes[0]
            colors = plt.cm.viridis(np.linspace(0.0, 1.0, len(u.times)))
            for t, v, c in zip(u.times, u.values, colors):
                ax.plot(x, v, color=c, label=f"t={t:.3g}")
            ax.set_xlabel("x")
            ax.set_ylabel(label)
            if len(u.times) <= 8:
                ax.legend(frameon=False, fontsize=7)
        else:
            img = u.values[0].reshape(u.space.shape)
            L = u.space.half_width
            im = ax.imshow(img.T, origin="lower", extent=(-L, L, -L, L), cmap="viridis")
            fig.colorbar(im, ax=ax)
            ax.set_title(f"{label} at t={u.times[0]:.3g}")
        return _save(fig, path)


def plot_measure(rho, path, bins=60):
    """Weighted histograms of the first coordinate at every recorded time."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        colors = plt.cm.magma(np.linspace(0.1, 0.85, len(rho.times)))
        for r, (t, c) in enumerate(zip(rho.times, colors)):
            x, m = rho.atoms(r)
            ax.hist(x[:, 0], bins=bins, weights=m, histtype="step", color=c, density=False, label=f"t={t:.3g}")
        ax.set_xlabel("x1")
        ax.set_ylabel("mass")
        if len(rho.times) <= 8:
            ax.legend(frameon=False, fontsize=7)
        return _save(fig, path)


def plot_residuals(reports, path):
    """Residual series per test function against the tolerance line."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(reports), squeeze=False)
        for ax, (title, rep) in zip(axes[0], reports.items()):
            for name, res in rep.residuals.items():
                ax.semilogy(rep.times, np.maximum(res, 1e-17), label=name)
            ax.axhline(rep.tolerance, color="k", ls="--", lw=0.8)
            ax.set_xlabel("t")
            ax.set_title(title)
            ax.legend(frameon=False, fontsize=6)
        return _save(fig, path)


def plot_duality(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(report.times, report.gaps, "o-", label="gap")
        ax.plot(report.times, report.factor * report.std_errors + report.atol, "k--", label="bound")
        ax.set_xlabel("t")
        ax.set_ylabel("|rho_t(u_t) - rho_0(u_0)|")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_convergence(table, path):
    """Metric and gap columns of a Wong-Zakai table on a log scale."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        lv = table.column("level")
        for key in ("metric", "field_gap", "kr_gap"):
            ax.semilogy(lv, table.column(key), "o-", label=key)
        ax.set_xlabel("dyadic level")
        ax.legend(frameon=False)
        return _save(fig, path)
