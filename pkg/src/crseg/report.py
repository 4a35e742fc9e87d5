"""Collect per-run scores into comparison tables and figures."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .evaluation import (GROUPS, LEVELS, METRICS, SubjectScore, assign_groups, format_table1,
                         format_table2, improvement_table, read_scores, summary_table, write_scores,
                         write_table1, write_table2)

DISPLAY = {"basic": "Basic", "s": "S", "s_plus": "S+", "s_plus_t": "S+T",
           "mean_teacher": "mean teacher", "self_training": "self-training"}
ABLATION = ("basic", "s", "s_plus", "s_plus_t")
TABLE2_METHODS = {"mean teacher": "mean_teacher", "self-training": "self_training", "ours": "s_plus_t"}


def collect_scores(runs_dir: str | Path) -> list[SubjectScore]:
    files = sorted(Path(runs_dir).rglob("scores.csv"))
    if not files:
        raise FileNotFoundError(f"no scores.csv below {runs_dir}")
    return [s for f in files for s in read_scores(f)]


def average_duplicates(scores: list[SubjectScore]) -> list[SubjectScore]:
    """One score per (setting, level, subject): repeated seeds are averaged."""
    buckets = defaultdict(list)
    for s in scores:
        buckets[(s.setting, s.level, s.subject_id)].append(s)
    out = []
    for (setting, level, sid), group in sorted(buckets.items()):
        out.append(SubjectScore(sid, float(np.mean([g.dice_gt for g in group])),
                                float(np.mean([g.temporal_dice for g in group])), setting, level))
    return out


def _by(scores, setting, level="all"):
    return [s for s in scores if s.setting == setting and s.level == level]


def build_report(scores: list[SubjectScore], out_dir: str | Path) -> dict:
    """Write ``scores.csv`` (with groups), ``table1.csv/.txt`` and ``table2.csv/.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores = average_duplicates(scores)
    basic = _by(scores, "basic")
    if basic:
        basic_ids = {s.subject_id for s in basic}
        grouped = [s for s in scores if s.level == "all" and s.subject_id in basic_ids]
        grouped = assign_groups(grouped, basic)
        rest = [s for s in scores if not (s.level == "all" and s.subject_id in basic_ids)]
        scores = grouped + rest
    write_scores(out_dir / "scores.csv", scores)
    result = {"scores": scores}
    tables = {}
    for setting in ABLATION[1:]:
        current = _by(scores, setting)
        if basic and current and {s.subject_id for s in current} == {s.subject_id for s in basic}:
            tables[f"{DISPLAY[setting]} vs. Basic"] = improvement_table(current, basic)
    if tables:
        write_table1(out_dir / "table1.csv", tables)
        (out_dir / "table1.txt").write_text(format_table1(tables) + "\n")
    result["table1"] = tables
    by_method = {name: {lvl: _by(scores, setting, lvl) for lvl in LEVELS}
                 for name, setting in TABLE2_METHODS.items()}
    table2 = summary_table(by_method)
    write_table2(out_dir / "table2.csv", table2)
    (out_dir / "table2.txt").write_text(format_table2(table2) + "\n")
    result["table2"] = table2
    return result


def _kde(values, grid):
    from scipy.stats import gaussian_kde

    v = np.asarray(values, dtype=float)
    if v.size >= 2 and v.std() > 0:
        try:
            return gaussian_kde(v)(grid)
        except np.linalg.LinAlgError:
            pass
    bw = 0.01
    return np.mean([np.exp(-0.5 * ((grid - x) / bw) ** 2) for x in v], axis=0) / (bw * np.sqrt(2 * np.pi))


def emit_plots(report_dir: str | Path, out_dir: str | Path | None = None) -> dict:
    """Density curves per ablation setting and LOW/HIGH/ALL boxplots of S+T - Basic.

    The plotted data is always written as CSV next to the images.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report_dir = Path(report_dir)
    out_dir = Path(out_dir) if out_dir else report_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    scores = [s for s in read_scores(report_dir / "scores.csv") if s.level == "all"]
    info = {"kde_curves": {}, "boxes": {}}

    settings = [s for s in ABLATION if _by(scores, s)]
    with open(out_dir / "fig2_density.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("setting", "subject_id", "dice_gt", "temporal_dice"))
        for setting in settings:
            for s in _by(scores, setting):
                w.writerow((setting, s.subject_id, repr(s.dice_gt), repr(s.temporal_dice)))
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    grid = np.linspace(0, 1, 201)
    for ax, metric, title in zip(axes, METRICS, ("Dice w. ground truth", "Temporal Dice")):
        n = 0
        for setting in settings:
            vals = [getattr(s, metric) for s in _by(scores, setting)]
            ax.plot(grid, _kde(vals, grid), label=DISPLAY[setting])
            n += 1
        info["kde_curves"][metric] = n
        ax.set_title(title)
        ax.set_xlabel("Dice")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "fig2_density.png", dpi=100)
    plt.close(fig)

    basic = {s.subject_id: s for s in _by(scores, "basic")}
    ours = {s.subject_id: s for s in _by(scores, "s_plus_t")}
    rows = []
    for sid in sorted(basic.keys() & ours.keys()):
        for metric, gkey in zip(METRICS, ("group_gt", "group_td")):
            delta = getattr(ours[sid], metric) - getattr(basic[sid], metric)
            rows.append((sid, metric, getattr(ours[sid], gkey) or getattr(basic[sid], gkey), delta))
    with open(out_dir / "fig3_boxplot.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("subject_id", "metric", "group", "delta"))
        for r in rows:
            w.writerow(r[:3] + (repr(r[3]),))
    if rows:
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        for ax, metric in zip(axes, METRICS):
            data = [[r[3] for r in rows if r[1] == metric and (g == "ALL" or r[2] == g)] for g in GROUPS]
            ax.boxplot(data)
            ax.set_xticks(range(1, len(GROUPS) + 1), GROUPS)
            ax.axhline(0, color="grey", lw=0.5)
            ax.set_title(f"S+T - Basic: {metric}")
            info["boxes"][metric] = len(data)
        fig.tight_layout()
        fig.savefig(out_dir / "fig3_boxplot.png", dpi=100)
        plt.close(fig)
    return info
