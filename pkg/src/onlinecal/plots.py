"""SVG figures for sweeps, calibration audits, savings histograms and score traces.

Output is byte-stable: the SVG hash salt is fixed and no date is embedded.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "onlinecal"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def sweep_svg(rows, path, label: str = "probe") -> None:
    deltas = [r.delta for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.plot(deltas, [r.savings_step for r in rows], "o-", label=label)
    ax1.set_xlabel("risk tolerance delta")
    ax1.set_ylabel("step savings")
    ax1.legend()
    lim = max(deltas) * 1.1
    ax2.plot([0, lim], [0, lim], "k--", lw=1, gid="reference-diagonal", label="y = x")
    ax2.plot(deltas, [r.error_rate for r in rows], "o-", label=label)
    ax2.set_xlabel("target risk delta")
    ax2.set_ylabel("empirical error rate")
    ax2.legend()
    fig.tight_layout()
    _save(fig, path)


def calibration_svg(res, path) -> None:
    lams = [r.lam for r in res.records]
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.plot(lams, [r.risk for r in res.records], label="empirical risk")
    ax.plot(lams, [r.pvalue for r in res.records], label="p-value")
    ax.axhline(res.spec.delta, color="k", ls=":", lw=1, label="delta")
    ax.axhline(res.spec.epsilon, color="grey", ls=":", lw=1, label="epsilon")
    if res.lambda_star is not None:
        ax.axvline(res.lambda_star, color="r", lw=1, gid="lambda-star", label="selected threshold")
    ax.set_xlabel("threshold")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def savings_hist_svg(report, path, bins: int = 20) -> None:
    sav = np.asarray(report.per_problem_savings)
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.hist(sav, bins=bins, range=(0, 1), alpha=0.6)
    ax.axvline(sav.mean(), color="k", ls="-", gid="mean-rule", label=f"mean {sav.mean():.3f}")
    ax.axvline(np.median(sav), color="k", ls="--", gid="median-rule", label=f"median {np.median(sav):.3f}")
    ax.set_xlabel("per-problem step savings")
    ax.set_ylabel("problems")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def trace_svg(records, path, threshold=None) -> None:
    steps = [r.step for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(steps, [r.raw for r in records], alpha=0.5, label="raw")
    ax.plot(steps, [r.smoothed for r in records], label="smoothed")
    if threshold is not None:
        ax.axhline(threshold, color="r", ls="--", lw=1, gid="threshold", label="threshold")
    first = records[0].first_correct if records else None
    if first is not None:
        ax.axvline(first, color="g", lw=1, gid="first-correct", label="first correct step")
    ax.set_ylim(0, 1)
    ax.set_xlabel("step")
    ax.set_ylabel("score")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def diagonal_svg(deltas, errors_by_label: dict, path) -> None:
    """Empirical error against target risk for several probes, with the y = x line."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    lim = max(deltas) * 1.1
    ax.plot([0, lim], [0, lim], "k--", lw=1, gid="reference-diagonal", label="y = x")
    for label, errs in errors_by_label.items():
        ax.plot(deltas, errs, "o-", label=label)
    ax.set_xlabel("target risk delta")
    ax.set_ylabel("empirical error rate")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
