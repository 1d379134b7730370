"""Figures written next to CSV outputs.  Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_SIZE = (5.0, 3.6)
DPI = 120


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_trace(trace, path):
    """Training log likelihood per iteration."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    it = [r.iter for r in trace]
    ll = [r.loglik for r in trace]
    ax.plot(it, ll, lw=1.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("collapsed log likelihood")
    return _save(fig, path)


def plot_k_sweep(summary, path, ks=None):
    """Mean held-out metric with one standard error per config.

    ``summary`` rows are ``(config, mean, stderr, folds)``; ``ks`` gives the
    x position of each row (defaults to row order).
    """
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    x = np.arange(len(summary)) if ks is None else np.asarray(ks)
    mean = np.array([r[1] for r in summary])
    se = np.nan_to_num(np.array([r[2] for r in summary]))
    ax.errorbar(x, mean, yerr=se, marker="o", capsize=3)
    if ks is None:
        ax.set_xticks(x)
        ax.set_xticklabels([r[0] for r in summary], rotation=45, ha="right", fontsize=7)
    else:
        ax.set_xlabel("number of topics")
    ax.set_ylabel("held-out log likelihood")
    return _save(fig, path)


def plot_roc_pr(metrics, path):
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(FIG_SIZE[0] * 1.8, FIG_SIZE[1]))
    a1.plot(metrics.roc[:, 0], metrics.roc[:, 1], drawstyle="steps-post")
    a1.plot([0, 1], [0, 1], ls=":", color="grey")
    a1.set_xlabel("false positive rate")
    a1.set_ylabel("true positive rate")
    a1.set_title(f"AUROC {metrics.auroc:.3f}")
    a2.plot(metrics.pr[:, 0], metrics.pr[:, 1], drawstyle="steps-pre")
    a2.set_xlabel("recall")
    a2.set_ylabel("precision")
    a2.set_ylim(0, 1.02)
    a2.set_title(f"AUPRC {metrics.auprc:.3f}")
    return _save(fig, path)


def plot_missing_curves(curves, path):
    """Missing-lab score against training iteration, one line per config.

    ``curves`` maps label -> {fold: [(iteration, score), ...]}; folds are
    averaged at shared iterations.
    """
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    for label, per_fold in curves.items():
        its = sorted({i for c in per_fold.values() for i, _ in c})
        mean = []
        for i in its:
            vals = [s for c in per_fold.values() for j, s in c if j == i]
            mean.append(np.mean(vals))
        ax.plot(its, mean, marker=".", label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("missing-lab log likelihood")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_lab_heatmap(score, path, lab_ids=None):
    """Labs x topics heat map of lab-topic scores."""
    L, K = score.shape
    fig, ax = plt.subplots(figsize=(max(3.0, 0.35 * K + 2), max(3.0, 0.18 * L + 1.5)))
    im = ax.imshow(score, aspect="auto", cmap="viridis", interpolation="nearest")
    ax.set_xlabel("topic")
    ax.set_ylabel("lab")
    ax.set_xticks(np.arange(K))
    ax.set_xticklabels(np.arange(1, K + 1), fontsize=7)
    if lab_ids is not None and L <= 60:
        ax.set_yticks(np.arange(L))
        ax.set_yticklabels(lab_ids, fontsize=6)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)
