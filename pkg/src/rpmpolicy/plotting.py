"""SVG figures for sweep reports.

All figures go through :func:`save_svg`, which pins the SVG id salt and
drops the date stamp so identical inputs give byte-identical files.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "svg.hashsalt": "rpmpolicy",
    "svg.fonttype": "none",
}
METHOD_MARKERS = {"s_learner": "o", "t_learner": "s", "x_learner": "^",
                  "causal_forest": "D", "dr_forest": "v", "ensemble": "*", "oracle": "P"}


def save_svg(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def toc_figure(report, path, title: str = "", scale: float = 100.0) -> Path:
    """TOC curve with its bootstrap band and the highest-ATE baseline."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        grid = np.asarray(report.grid)
        ax.fill_between(grid, scale * np.asarray(report.ci_low), scale * np.asarray(report.ci_high),
                        color="C0", alpha=0.25, lw=0)
        ax.plot(grid, scale * np.asarray(report.att), color="C0", lw=1.5, label="ATT@K")
        ax.axhline(scale * report.baseline, color="C3", ls="--", lw=1,
                   label=f"ATE, action {report.baseline_action}")
        ax.axhline(0.0, color="0.4", lw=0.6)
        ax.set_xlabel("treated fraction K/N")
        ax.set_ylabel("effect on TIR change (pp)")
        ax.set_xlim(0, 1)
        if title:
            ax.set_title(title)
        ax.legend(loc="upper right")
        return save_svg(fig, path)


def toc_overlay_figure(reports: dict, path, title: str = "", scale: float = 100.0) -> Path:
    """Several TOC curves (label -> TocReport) on shared axes."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        for j, (label, rep) in enumerate(reports.items()):
            grid = np.asarray(rep.grid)
            ax.fill_between(grid, scale * np.asarray(rep.ci_low), scale * np.asarray(rep.ci_high),
                            color=f"C{j % 10}", alpha=0.15, lw=0)
            ax.plot(grid, scale * np.asarray(rep.att), color=f"C{j % 10}", lw=1.3, label=label)
        ax.axhline(0.0, color="0.4", lw=0.6)
        ax.set_xlabel("treated fraction K/N")
        ax.set_ylabel("effect on TIR change (pp)")
        ax.set_xlim(0, 1)
        if title:
            ax.set_title(title)
        ax.legend(loc="upper right", fontsize=7)
        return save_svg(fig, path)


def att_grid_figure(summary: pd.DataFrame, path, scale: float = 100.0) -> Path:
    """ATT@25% with intervals for every sweep cell, one panel per action scheme.

    ``summary`` needs columns state_mode, action_scheme, method, att25,
    att25_low, att25_high, baseline, baseline_low, baseline_high.
    """
    schemes = list(dict.fromkeys(summary["action_scheme"]))
    modes = list(dict.fromkeys(summary["state_mode"]))
    methods = list(dict.fromkeys(summary["method"]))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(schemes), figsize=(3.6 * len(schemes), 0.5 + 0.45 * len(modes) * 1.6),
                                 sharex=True, squeeze=False)
        for ax, scheme in zip(axes[0], schemes):
            sub = summary[summary["action_scheme"] == scheme]
            for i, mode in enumerate(modes):
                cell = sub[sub["state_mode"] == mode]
                if cell.empty:
                    continue
                base = cell.iloc[0]
                ax.axhspan(i - 0.4, i + 0.4, xmin=0, xmax=1, color="0.93", lw=0)
                ax.errorbar([scale * base.baseline], [i - 0.3],
                            xerr=[[scale * (base.baseline - base.baseline_low)],
                                  [scale * (base.baseline_high - base.baseline)]],
                            fmt="|", color="0.35", ms=8, capsize=2)
                for j, method in enumerate(methods):
                    row = cell[cell["method"] == method]
                    if row.empty:
                        continue
                    r = row.iloc[0]
                    yy = i - 0.15 + 0.45 * j / max(1, len(methods) - 1)
                    ax.errorbar([scale * r.att25], [yy],
                                xerr=[[scale * (r.att25 - r.att25_low)], [scale * (r.att25_high - r.att25)]],
                                fmt=METHOD_MARKERS.get(method, "o"), color=f"C{j % 10}", ms=4, capsize=2,
                                label=method if i == 0 else None)
            ax.set_yticks(range(len(modes)))
            ax.set_yticklabels(modes)
            ax.axvline(0.0, color="0.4", lw=0.6)
            ax.set_title(scheme)
            ax.set_xlabel("ATT@25% (pp)")
            ax.invert_yaxis()
        axes[0][-1].legend(loc="lower right", fontsize=7)
        return save_svg(fig, path)


def slice_figure(slices: pd.DataFrame, feature: str, path, scale: float = 100.0) -> Path:
    """Mean predicted best-action effect against one feature.

    ``slices`` has columns value, mean_score and optionally q25/q75.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        x = slices["value"].to_numpy()
        if {"q25", "q75"} <= set(slices.columns):
            ax.fill_between(x, scale * slices["q25"], scale * slices["q75"], color="C0", alpha=0.2, lw=0)
        marker = "o" if len(x) <= 3 else None
        ax.plot(x, scale * slices["mean_score"], color="C0", marker=marker, lw=1.5)
        ax.set_xlabel(feature)
        ax.set_ylabel("predicted effect (pp)")
        return save_svg(fig, path)


def history_figure(table: pd.DataFrame, path, scale: float = 100.0) -> Path:
    """ATT@25% with intervals against the control-covariate history length."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        h = table["history_weeks"].to_numpy()
        att = scale * table["att25"].to_numpy()
        ax.errorbar(h, att, yerr=[att - scale * table["att25_low"].to_numpy(),
                                  scale * table["att25_high"].to_numpy() - att],
                    fmt="o-", color="C0", capsize=3)
        ax.set_xticks(h)
        ax.set_xlabel("control covariate history (weeks)")
        ax.set_ylabel("ATT@25% (pp)")
        return save_svg(fig, path)
