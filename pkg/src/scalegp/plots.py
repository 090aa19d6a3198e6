"""Figure rendering for the report path.

Figures are written next to the delimited outputs: a prediction plot (mean
with a 95% band for 1-d inputs, predicted-vs-actual otherwise) and the
optimizer convergence trace.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def prediction_figure(path, train, test, pred_obs, stats, Z=None):
    """Render the predictive distribution in original units.

    1-d inputs: training scatter, predictive mean with a 2-sigma band, the
    noiseless target curve when available, and inducing-point positions.
    Higher dimensions: predicted vs actual scatter.
    """
    X_tr = train.X * stats.x_std + stats.x_mean
    y_tr = train.y * stats.y_std + stats.y_mean
    X_te = test.X * stats.x_std + stats.x_mean
    y_te = test.y * stats.y_std + stats.y_mean
    mean = stats.undo_y_mean(pred_obs.mean)
    sd = np.sqrt(stats.undo_y_var(pred_obs.variance))

    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    if train.d == 1:
        order = np.argsort(X_te[:, 0])
        x = X_te[order, 0]
        ax.fill_between(x, mean[order] - 2 * sd[order], mean[order] + 2 * sd[order],
                        alpha=0.25, color="tab:blue", label="95% interval")
        ax.plot(x, mean[order], color="tab:blue", lw=1.5, label="prediction mean")
        if test.latent_y is not None:
            f = test.latent_y * stats.y_std + stats.y_mean
            ax.plot(x, f[order], color="tab:green", lw=1.0, ls="--", label="latent truth")
        ax.plot(X_tr[:, 0], y_tr, "k+", ms=5, alpha=0.7, label="training points")
        if Z is not None:
            ax.plot(Z[:, 0], np.full(Z.shape[0], ax.get_ylim()[0]), "r^",
                    ms=6, clip_on=False, label="inducing points")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
    else:
        ax.scatter(y_te, mean, s=8, alpha=0.5)
        lims = [min(y_te.min(), mean.min()), max(y_te.max(), mean.max())]
        ax.plot(lims, lims, "k--", lw=1.0)
        ax.set_xlabel("actual y")
        ax.set_ylabel("predicted mean")
    if train.d == 1:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def trace_figure(path, trace, ylabel="objective"):
    """Convergence curve: objective value against iteration."""
    iters = [row[0] for row in trace.iterations]
    vals = [row[1] for row in trace.iterations]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(iters, vals, lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
