#!/usr/bin/env python3
"""Scatter of finite-difference gradient components against closed forms.

Left panel: budget-side slope vs minus the optimal multiplier.  Right panel:
congestion-side slope vs the analytic envelope value.  Points on the y=x
reference confirm exact correspondence up to solver precision.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from plot_common import load_rows, parse_args, save_figure

REQUIRED = {"local_fd", "neg_lambda_scaled", "coupling_fd", "coupling_analytic"}


def main() -> None:
    args = parse_args(__doc__)
    rows = load_rows(args.input, REQUIRED)
    panels = [
        ("neg_lambda_scaled", "local_fd", "budget slope vs -lambda*"),
        ("coupling_analytic", "coupling_fd", "congestion slope vs analytic"),
    ]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, (x_col, y_col, title) in zip(axes, panels):
        xs = [float(r[x_col]) for r in rows]
        ys = [float(r[y_col]) for r in rows]
        ax.scatter(xs, ys, s=18, alpha=0.8)
        lo = min(xs + ys)
        hi = max(xs + ys)
        pad = 0.05 * (hi - lo or 1.0)
        ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], "k--", linewidth=1)
        ax.set_xlabel("closed form")
        ax.set_ylabel("finite difference")
        ax.set_title(title)
    fig.tight_layout()
    save_figure(fig, args.output)


if __name__ == "__main__":
    main()
