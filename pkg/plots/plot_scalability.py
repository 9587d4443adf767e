#!/usr/bin/env python3
"""Grouped boxplot of normalized final rewards per (method, system size).

Consumes the scalability experiment CSV; the horizontal line at 1.0 marks
the no-offloading normalization baseline.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from plot_common import load_rows, parse_args, save_figure

REQUIRED = {"seed", "method", "n_agents", "normalized_final_reward"}


def main() -> None:
    args = parse_args(__doc__)
    rows = load_rows(args.input, REQUIRED)
    groups: dict[tuple[int, str], list[float]] = {}
    for row in rows:
        key = (int(row["n_agents"]), row["method"])
        groups.setdefault(key, []).append(float(row["normalized_final_reward"]))
    keys = sorted(groups)
    fig, ax = plt.subplots(figsize=(7, 4))
    data = [groups[k] for k in keys]
    labels = [f"{method}\nN={n}" for n, method in keys]
    ax.boxplot(data, tick_labels=labels)
    ax.axhline(1.0, color="grey", linestyle="--", linewidth=1)
    ax.set_ylabel("normalized final reward (lower is better)")
    ax.set_title("Final reward across methods and system sizes")
    save_figure(fig, args.output)


if __name__ == "__main__":
    main()
