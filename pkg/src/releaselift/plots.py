"""Figure rendering for panel summaries and lift reports.

All functions render straight to files with the non-interactive Agg
backend; they are what the command-line report path uses to drop PNGs
next to the delimited output.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .counterfactual import CcrReport
from .diagnostics import AdopterCurves
from .panel import Panel, StudyWindow


def weekly_aggregate_figure(panel: Panel, path) -> None:
    """Mean weekly response across active users, with release markers."""
    window = panel.window
    T = window.n_weeks
    resp = panel.weekly_response_matrix()
    active = np.stack([rec.sessions > 0 for rec in panel.users])
    counts = active.sum(axis=0).astype(float)
    counts[counts == 0] = np.nan
    mean = np.where(active, resp, 0.0).sum(axis=0) / counts
    fig, ax = plt.subplots(figsize=(9, 4.5))
    ax.plot(range(1, T + 1), mean, lw=1.8, color="tab:blue")
    for v, w in window.release_schedule:
        ax.axvline(w, color="grey", lw=0.8, ls="--", alpha=0.7)
        ax.annotate(v, (w, ax.get_ylim()[1]), fontsize=8, ha="left",
                    va="top", rotation=90, alpha=0.8)
    ax.set_xlabel("week")
    ax.set_ylabel("mean response per active user")
    ax.set_title("Weekly response with release timing")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def adopter_curves_figure(curves: AdopterCurves, window: StudyWindow, path,
                          max_weeks: int = 12) -> None:
    """Response of each release's current users, weeks since release.

    The characteristic early-adopter pattern shows up as curves that
    start high and decay as later, more typical users arrive.
    """
    means = curves.mean_response
    fig, ax = plt.subplots(figsize=(9, 4.5))
    cmap = plt.get_cmap("viridis")
    sched = window.release_schedule
    for i, (v, rel) in enumerate(sched):
        xs, ys = [], []
        for k in range(max_weeks):
            wk = rel + k
            if wk > window.n_weeks:
                break
            val = means.get((v, wk))
            if val is not None:
                xs.append(k)
                ys.append(val)
        if xs:
            ax.plot(xs, ys, marker="o", ms=3, lw=1.4,
                    color=cmap(i / max(len(sched) - 1, 1)), label=v)
    ax.set_xlabel("weeks since release")
    ax.set_ylabel("mean response of current users")
    ax.set_title("Per-release user response by release age")
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ccr_figure(report: CcrReport, path) -> None:
    """Observed vs counterfactual weekly totals with the simulation band."""
    fig, ax = plt.subplots(figsize=(9, 4.5))
    weeks = report.lifetime_weeks
    ax.plot(weeks, report.factual_total, lw=1.8, color="tab:blue",
            label="observed")
    ax.plot(weeks, report.cf_total, lw=1.8, color="tab:orange",
            label="counterfactual")
    if report.draws_used:
        ax.fill_between(weeks, report.cf_lower, report.cf_upper,
                        color="tab:orange", alpha=0.2, label="band")
    lo, hi = report.ccr_band
    band_txt = f"  [{lo:.3f}, {hi:.3f}]" if report.draws_used else ""
    ax.set_title(f"{report.cv}: lift ratio {report.ccr_mean:.3f}{band_txt}")
    ax.set_xlabel("week")
    ax.set_ylabel("total response, treated users")
    ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
