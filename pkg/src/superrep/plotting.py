"""Figures written next to the JSON/CSV outputs (Agg backend, PNG files)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_objective_curve(curve, delta_hat, price, path):
    """Objective along one costly holding (rows from the price report), optimum marked."""
    d = np.array([c["delta"][c["axis"]] for c in curve], dtype=float)
    v = np.array([c["objective"] for c in curve], dtype=float)
    ok = np.isfinite(v)
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(d[ok], v[ok], "-", color="C0", lw=1.4)
    k = curve[0]["axis"] if curve else 0
    ax.plot([delta_hat[k]], [price], "o", color="C3", label=f"optimum {price:.4f}")
    ax.set_xlabel("costly holding (units)")
    ax.set_ylabel("objective")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_envelope_fiber(grid, sf, path, sc_max=None):
    """``G`` and its concave envelope along the costly axis at one free price."""
    axis = grid.sf_axes[0]
    i = int(np.argmin(np.abs(np.log(axis) - np.log(sf))))
    if grid.df > 1 or grid.dc > 1:
        return
    x = grid.sc_axes[0]
    keep = x <= (sc_max if sc_max is not None else x[-1])
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(x[keep], grid.G_values[i, keep], ".", ms=3, color="0.4", label="G")
    ax.plot(x[keep], grid.Ghat_values[i, keep], "-", color="C0", lw=1.4, label="envelope")
    ax.set_xlabel("costly price")
    ax.set_ylabel("value")
    ax.set_title(f"free price {axis[i]:.4g}", fontsize=10)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_margins(margins, tol, path):
    """Histogram of terminal liquidation margins with the tolerance line."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.hist(margins, bins=80, color="C0", alpha=0.8)
    ax.axvline(-tol, color="C3", lw=1.2, ls="--", label=f"-tolerance ({tol:.3g})")
    ax.set_xlabel("terminal margin")
    ax.set_ylabel("paths")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_hjb_contour(value, path):
    """Contour of ``v_kappa(0, .)`` in log coordinates."""
    z1, z2 = value.z_axes
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    cs = ax.contourf(np.log(z1), np.log(z2), value.values0.T, levels=24, cmap="viridis")
    fig.colorbar(cs, ax=ax)
    ax.set_xlabel("log free price")
    ax.set_ylabel("log costly price")
    ax.set_title(f"kappa = {value.kappa:g}", fontsize=10)
    _save(fig, path)


def plot_hjb_gap(kappas, values, price, path):
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(kappas, values, "o-", color="C0", label="lower bound")
    ax.axhline(price, color="C3", ls="--", lw=1.2, label="price")
    ax.set_xlabel("kappa")
    ax.set_ylabel("value")
    ax.legend(frameon=False)
    _save(fig, path)
