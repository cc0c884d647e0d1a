"""Static SVG figures from per-cell aggregate CSVs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiment import METRICS, read_aggregate  # noqa: E402

LABELS = {"none": "PPO", "savmpc": "PPO + reversibility shield", "oracle": "PPO + resampling shield"}
COLORS = {"none": "tab:blue", "savmpc": "tab:orange", "oracle": "tab:green"}
TITLES = {"reward": "Episode reward", "cum_violations": "Cumulative constraint violations", "cum_aborts": "Cumulative aborts"}


def plot_metric(out: Path, env: str, shields, metric: str) -> Path:
    with plt.rc_context({"svg.hashsalt": "revshield"}):
        return _plot_metric(out, env, shields, metric)


def _plot_metric(out, env, shields, metric):
    fig, ax = plt.subplots(figsize=(6, 4))
    for shield in shields:
        agg = read_aggregate(Path(out) / env / shield / "aggregate.csv")
        x, mean, std = agg["episode"], agg[f"{metric}_mean"], agg[f"{metric}_std"]
        color = COLORS.get(shield)
        ax.plot(x, mean, label=LABELS.get(shield, shield), color=color, lw=1.5)
        ax.fill_between(x, mean - std, mean + std, color=color, alpha=0.2, lw=0)
    ax.set_xlabel("episode")
    ax.set_ylabel(metric.replace("_", " "))
    ax.set_title(f"{env}: {TITLES[metric]}")
    ax.legend(frameon=False)
    fig.tight_layout()
    plot_dir = Path(out) / env / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    path = plot_dir / f"{metric}.svg"
    # no timestamp, so identical data gives identical files
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_environment(out: Path, env: str, shields) -> list:
    return [plot_metric(out, env, shields, m) for m in METRICS]
