"""Report figures (PNG, non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden = (np.sqrt(5) - 1) / 2
width = 6.0

params = {
    "figure.figsize": [width, width * golden],
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "image.cmap": "viridis",
}


def new(nrows=1, ncols=1, scale=1.0):
    with plt.rc_context(params):
        fig, ax = plt.subplots(nrows, ncols, figsize=(width * scale, width * golden * scale),
                               squeeze=False)
    return fig, ax


def save(fig, path):
    with plt.rc_context(params):
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def bridge_1d(sol, path):
    """Density over (t, z) plus a few time slices."""
    fig, ax = new(1, 2)
    z = sol.grid.axes()[0]
    ax[0, 0].imshow(sol.sigma_opt.T, origin="lower", aspect="auto",
                    extent=[0, 1, z[0], z[-1]])
    ax[0, 0].set_xlabel("t")
    ax[0, 0].set_ylabel("z")
    ax[0, 0].set_title("optimal density")
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        k = int(round(frac * sol.nt))
        ax[0, 1].plot(z, sol.sigma_opt[k], label=f"t={sol.times[k]:.2f}")
    ax[0, 1].set_xlabel("z")
    ax[0, 1].legend()
    return save(fig, path)


def bridge_2d(sol, path):
    fig, ax = new(1, 3, scale=1.2)
    lo, hi = sol.grid.box.lower, sol.grid.box.upper
    for a, frac in zip(ax[0], (0.0, 0.5, 1.0)):
        k = int(round(frac * sol.nt))
        a.imshow(sol.sigma_opt[k].T, origin="lower", aspect="auto",
                 extent=[lo[0], hi[0], lo[1], hi[1]])
        a.set_title(f"t={sol.times[k]:.2f}")
        a.set_xlabel("z1")
    ax[0, 0].set_ylabel("z2")
    return save(fig, path)


def moment_path(t, mean, var, path, ref_mean=None, ref_var=None):
    """Mean and variance against time, optionally with reference curves."""
    fig, ax = new(1, 2)
    ax[0, 0].plot(t, mean, label="solver")
    ax[0, 1].plot(t, var, label="solver")
    if ref_mean is not None:
        ax[0, 0].plot(t, ref_mean, "--", label="closed form")
    if ref_var is not None:
        ax[0, 1].plot(t, ref_var, "--", label="closed form")
    ax[0, 0].set_ylabel("mean")
    ax[0, 1].set_ylabel("variance")
    for a in ax[0]:
        a.set_xlabel("t")
        a.legend()
    return save(fig, path)


def terminal_1d(points, grid, target, path):
    """Histogram of terminal particles over the target density."""
    fig, ax = new()
    z = grid.axes()[0]
    ax[0, 0].hist(points, bins=80, density=True, alpha=0.5, label="particles")
    ax[0, 0].plot(z, target, label="target")
    ax[0, 0].set_xlabel("z")
    ax[0, 0].legend()
    return save(fig, path)


def terminal_2d(start, end, path, labels=("x1", "x2")):
    fig, ax = new()
    ax[0, 0].scatter(start[:, 0], start[:, 1], s=2, alpha=0.4, label="t=0")
    ax[0, 0].scatter(end[:, 0], end[:, 1], s=2, alpha=0.4, label="t=1")
    ax[0, 0].set_xlabel(labels[0])
    ax[0, 0].set_ylabel(labels[1])
    ax[0, 0].legend()
    return save(fig, path)
