#!/usr/bin/env python3
"""Offload-frequency evolution per method, averaged across seeds."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from plot_common import load_rows, parse_args, save_figure

REQUIRED = {"seed", "method", "step", "offload_frequency"}


def main() -> None:
    args = parse_args(__doc__)
    rows = load_rows(args.input, REQUIRED)
    series: dict[str, dict[int, list[float]]] = {}
    for row in rows:
        by_step = series.setdefault(row["method"], {})
        by_step.setdefault(int(row["step"]), []).append(float(row["offload_frequency"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(series):
        steps = sorted(series[method])
        means = [sum(series[method][s]) / len(series[method][s]) for s in steps]
        ax.plot(steps, means, marker="o", label=method)
    ax.set_xlabel("learning steps")
    ax.set_ylabel("offload frequency")
    ax.set_title("Offloading frequency during training")
    ax.legend()
    save_figure(fig, args.output)


if __name__ == "__main__":
    main()
