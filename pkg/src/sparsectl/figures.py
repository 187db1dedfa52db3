"""Static figure rendering for CLI reports.

Everything draws through the Agg backend straight to files, next to the
CSV/JSON outputs. PNG metadata is pinned so repeated runs produce
byte-identical images.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_schedule_figure",
    "save_rebalance_figure",
    "save_duration_figure",
    "save_simulation_figure",
]

_SAVE_KW = dict(dpi=130, metadata={"Software": "sparsectl"})


def save_schedule_figure(scores, schedule, path, baseline=None) -> None:
    """Score curves over the horizon plus a Gantt strip of active channels."""
    grid = scores.grid
    t = grid.midpoints
    f = scores.scores
    m = f.shape[1]
    fig, (ax_f, ax_g) = plt.subplots(
        2, 1, figsize=(7.2, 5.4), sharex=True,
        gridspec_kw={"height_ratios": [2.0, 1.2]},
    )
    for j in range(m):
        ax_f.plot(t, f[:, j], label=f"$f_{{{j + 1}}}$", lw=1.4)
    ax_f.set_ylabel("channel score")
    ax_f.legend(loc="upper left", ncols=min(m, 4), fontsize=8)
    ax_f.grid(alpha=0.25)

    dt = grid.dt
    for j in range(m):
        on = schedule.values[:, j] > 0.5
        spans = []
        start = None
        for k, flag in enumerate(on):
            if flag and start is None:
                start = k * dt
            elif not flag and start is not None:
                spans.append((start, k * dt - start))
                start = None
        if start is not None:
            spans.append((start, grid.horizon - start))
        ax_g.broken_barh(spans, (j + 0.6, 0.8), color=f"C{j % 10}")
    ax_g.set_ylim(0.4, m + 0.6)
    ax_g.set_yticks(range(1, m + 1), [f"ch {j + 1}" for j in range(m)])
    ax_g.set_xlabel("t")
    ax_g.grid(alpha=0.25, axis="x")
    title = f"objective {schedule.objective:.4f}"
    if baseline is not None:
        title += f"  (aggregate-budget baseline {baseline.objective:.4f})"
    ax_f.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_rebalance_figure(knots, states, n_stations, target, path) -> None:
    """Parked-count trajectories per station with the rebalancing target."""
    states = np.asarray(states)
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    for i in range(n_stations):
        ax.plot(knots, states[:, i], lw=1.3, label=f"station {i + 1}")
    ax.axhline(target, color="k", ls="--", lw=1.0, alpha=0.7)
    ax.set_xlabel("t [h]")
    ax.set_ylabel("parked vehicles")
    ax.legend(fontsize=7, ncols=2)
    ax.grid(alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_duration_figure(census, path, baseline_census=None, labels=None) -> None:
    """Per-channel activation duration (L0) bars, sparse vs baseline."""
    l0 = np.asarray(census.l0_per_channel)
    m = l0.size
    x = np.arange(m)
    fig, ax = plt.subplots(figsize=(8.0, 3.6))
    width = 0.42 if baseline_census is not None else 0.8
    ax.bar(x, l0, width=width, label=f"sparse (total {census.l0_total:.2f})")
    if baseline_census is not None:
        ax.bar(
            x + width,
            np.asarray(baseline_census.l0_per_channel),
            width=width,
            label=f"baseline (total {baseline_census.l0_total:.2f})",
            alpha=0.7,
        )
    ax.set_xlabel("channel")
    ax.set_ylabel("active duration")
    if labels is not None and m <= 30:
        ax.set_xticks(x, labels, rotation=90, fontsize=6)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_simulation_figure(summary, n_stations, path) -> None:
    """Monte-Carlo station means with +-3 SE bands against the ODE reference."""
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    t = summary.knots
    for i in range(n_stations):
        mu = summary.mean[:, i]
        band = 3.0 * summary.se[:, i]
        ax.fill_between(t, mu - band, mu + band, alpha=0.25, color=f"C{i % 10}")
        ax.plot(t, summary.ode[:, i], color=f"C{i % 10}", lw=1.2,
                label=f"station {i + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel("parked vehicles (mean, ODE)")
    ax.set_title(f"max |z| = {summary.max_abs_z:.2f} over {summary.runs} runs",
                 fontsize=10)
    ax.legend(fontsize=7, ncols=2)
    ax.grid(alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
