"""SVG emission from run CSVs: per-scenario loss and cumulative regret panels.

The CSVs stay the single source of truth; these figures are derived views
and are never parsed back. Colors follow a fixed convention per algorithm.
"""

from __future__ import annotations

import math
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .harness import read_rows_csv

ALGO_COLORS = {
    "rasp": "red",
    "cma": "green",
    "gp": "blue",
    "random": "gray",
    "nomem": "purple",
}
ALGO_LABELS = {
    "rasp": "RASP-Tuner",
    "cma": "CMA-ES",
    "gp": "Bayesian Optimization",
    "random": "Random Search",
    "nomem": "NoMemory-RASP",
}


def seed_mean_band(rows, column: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-step seed mean and 1.96 * SE half-width for one (scenario, algorithm)."""
    by_seed: dict[int, dict[int, float]] = defaultdict(dict)
    for row in rows:
        by_seed[row["seed"]][row["step"]] = row[column]
    seeds = sorted(by_seed)
    steps = sorted(by_seed[seeds[0]])
    values = np.array([[by_seed[seed][step] for step in steps] for seed in seeds])
    mean = values.mean(axis=0)
    if len(seeds) > 1:
        half = 1.96 * values.std(axis=0, ddof=1) / math.sqrt(len(seeds))
    else:
        half = np.zeros_like(mean)
    return np.asarray(steps), mean, half


def emit_plots(run_dir: str, out_dir: str | None = None) -> list[str]:
    """Write one two-panel SVG (loss left, cumulative regret right) per scenario."""
    data_dir = os.path.join(run_dir, "data")
    out_dir = out_dir or os.path.join(run_dir, "plots")
    os.makedirs(out_dir, exist_ok=True)
    series: dict[str, dict[str, list[dict]]] = defaultdict(dict)
    for name in sorted(os.listdir(data_dir)):
        if not name.endswith(".csv"):
            continue
        scenario, _, algorithm = name[:-4].rpartition("__")
        rows = read_rows_csv(os.path.join(data_dir, name))
        if not rows:
            print(f"plots: skipping empty series {name}")
            continue
        series[scenario][algorithm] = rows

    written = []
    for scenario, by_algo in sorted(series.items()):
        fig, (ax_loss, ax_regret) = plt.subplots(1, 2, figsize=(10, 3.6))
        for algorithm, rows in sorted(by_algo.items()):
            color = ALGO_COLORS.get(algorithm, "black")
            label = ALGO_LABELS.get(algorithm, algorithm)
            for ax, column in ((ax_loss, "true_loss"), (ax_regret, "cum_regret")):
                steps, mean, half = seed_mean_band(rows, column)
                ax.plot(steps, mean, color=color, label=label, linewidth=1.5)
                ax.fill_between(steps, mean - half, mean + half, color=color, alpha=0.18, linewidth=0)
        ax_loss.set_title(f"{scenario}: loss")
        ax_regret.set_title(f"{scenario}: cumulative regret")
        for ax in (ax_loss, ax_regret):
            ax.set_xlabel("step")
            ax.grid(alpha=0.25)
        ax_loss.set_ylabel("true loss")
        ax_regret.set_ylabel("cumulative regret")
        ax_loss.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{scenario}.svg")
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)
    return written
