"""Figure rendering for report outputs.

Every CSV the CLI writes gets a matplotlib rendering next to it so runs can
be inspected without spinning up a notebook. All figures go through the Agg
backend and a small shared style.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (8.0, 5.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
}


def _finite(values):
    return [v for v in values if v is not None and not math.isnan(v)]


def training_curves(metrics: list[dict], path: Path):
    """Four-panel training summary: TB loss, log Z, rewards, modes."""
    steps = [m["step"] for m in metrics]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(10, 7))
        axes[0, 0].plot(steps, [m["tb_loss"] for m in metrics], lw=0.8)
        axes[0, 0].set_yscale("log")
        axes[0, 0].set_title("trajectory balance loss")
        axes[0, 1].plot(steps, [m["logZ"] for m in metrics], lw=0.8, color="tab:green")
        axes[0, 1].set_title("log Z")
        axes[1, 0].plot(steps, [m["mean_reward"] for m in metrics], lw=0.8,
                        color="tab:orange", label="mean reward")
        bwd = [(s, m["backward_reward_mean"]) for s, m in zip(steps, metrics)
               if not math.isnan(m["backward_reward_mean"])]
        if bwd:
            axes[1, 0].plot(*zip(*bwd), lw=0.8, color="tab:red",
                            label="backward reward")
        axes[1, 0].legend(loc="best")
        axes[1, 0].set_title("rewards")
        axes[1, 1].plot(steps, [m["modes_count"] for m in metrics], lw=0.8,
                        color="tab:purple")
        axes[1, 1].set_title("high-reward modes (distinct scaffolds)")
        for ax in axes.flat:
            ax.set_xlabel("training step")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def reward_histogram(rewards: list[float], path: Path, title: str = "sample rewards"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(_finite(rewards), bins=40, color="tab:blue", alpha=0.85)
        ax.set_xlabel("reward")
        ax.set_ylabel("count")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def similarity_histogram(similarities, path: Path,
                         title: str = "max similarity to reference"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(list(similarities), bins=40, range=(0, 1), color="tab:cyan",
                alpha=0.85)
        ax.set_xlabel("max Tanimoto similarity")
        ax.set_ylabel("count")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def solved_routes_bars(rows: list[dict], path: Path):
    """Bar chart of solved-route percentages per policy and split."""
    labels = [f"{r['policy']}\n({r['split']})" for r in rows]
    values = [r["solved_rate_pct"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bars = ax.bar(labels, values, color="tab:blue", alpha=0.85)
        ax.bar_label(bars, fmt="%.1f%%")
        ax.set_ylim(0, 105)
        ax.set_ylabel("solved routes (%)")
        ax.set_title("backward policy route recovery")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def space_estimate_bar(exp_logz: float, exact: int, path: Path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 4))
        bars = ax.bar(["exp(log Z)", "enumerated"], [exp_logz, exact],
                      color=["tab:green", "tab:gray"], alpha=0.85)
        ax.bar_label(bars, fmt="%.1f")
        ax.set_title("state-space size estimate")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
