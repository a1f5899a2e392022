"""PNG figures for the report command, drawn from plot-data files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .runio import read_columns  # noqa: E402

FIGSIZE = (6.0, 3.8)
_YLABEL = {
    "loss_curves": "training loss",
    "eig_trajectories": "largest kernel eigenvalue",
    "weight_trajectories": "task weight",
}
_LOG = {"loss_curves", "eig_trajectories"}


def _finish(fig, ax, path, title):
    ax.set_title(title, fontsize=9)
    ax.grid(alpha=0.3, lw=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_trajectories(dat, kind, png, title=""):
    cols, data = read_columns(dat)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for j, name in enumerate(cols[1:], start=1):
        ax.plot(data[:, 0], data[:, j], lw=1.0, label=name.split("_")[-1])
    if kind in _LOG and (data[:, 1:] > 0).all():
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel(_YLABEL.get(kind, kind))
    ax.legend(fontsize=7, frameon=False)
    return _finish(fig, ax, png, title)


def plot_decay(dat, png, title=""):
    """Fitted decay rate against eta * lambda, log-log, excluded components dropped."""
    cols, data = read_columns(dat)
    c = {n: i for i, n in enumerate(cols)}
    keep = data[:, c["excluded"]] == 0
    pred = data[keep, c["predicted_rate"]]
    fit = data[keep, c["fitted_rate"]]
    pos = (pred > 0) & (fit > 0)
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.loglog(pred[pos], fit[pos], "o", ms=4)
    if pos.any():
        lo, hi = min(pred[pos].min(), fit[pos].min()), max(pred[pos].max(), fit[pos].max())
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.7)
    ax.set_xlabel(r"$\eta\lambda_j$")
    ax.set_ylabel("fitted rate")
    return _finish(fig, ax, png, title)


def plot_prediction(dat, png, title=""):
    cols, data = read_columns(dat)
    c = {n: i for i, n in enumerate(cols)}
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(data[:, 0], data[:, c["actual_err"]], lw=1.2, label="integrated")
    ax.plot(data[:, 0], data[:, c["predicted_err"]], "--", lw=1.2, label="frozen kernel")
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\|O(t) - y\|$")
    ax.legend(fontsize=7, frameon=False)
    return _finish(fig, ax, png, title)
