"""Overlap metrics, per-subject scoring, LOW/HIGH grouping and summary tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .models import UNet3D, forward_seg, load_checkpoint
from .volume import LabelMap, LogitMap, TimeSeries, logits_to_labels, save_array

DICE_THRESHOLD = 0.8
TEMPORAL_THRESHOLD = 0.7
METRICS = ("dice_gt", "temporal_dice")
GROUPS = ("LOW", "HIGH", "ALL")
LEVELS = ("all", "60", "40", "20", "10", "5")


def _mask(a) -> np.ndarray:
    return np.asarray(a.data if isinstance(a, LabelMap) else a) > 0


def dice_coefficient(a, b) -> float:
    """``2|A n B| / (|A| + |B|)``; two empty masks score 1.0."""
    a, b = _mask(a), _mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def temporal_dice(predictions: Sequence) -> float:
    """Mean Dice of consecutive predictions."""
    if len(predictions) < 2:
        raise ValueError("temporal Dice needs at least two predictions")
    return float(np.mean([dice_coefficient(predictions[t], predictions[t + 1])
                          for t in range(len(predictions) - 1)]))


@dataclass(frozen=True)
class SubjectScore:
    subject_id: str
    dice_gt: float
    temporal_dice: float
    setting: str = ""
    level: str = "all"
    group_gt: str = ""
    group_td: str = ""


# ---------------------------------------------------------------- inference

def _net(checkpoint) -> UNet3D:
    if isinstance(checkpoint, torch.nn.Module):
        return checkpoint
    net, _ = load_checkpoint(checkpoint)
    return net


@torch.no_grad()
def predict_series(checkpoint, series: TimeSeries, export_logits: bool = False, batch_size: int = 8):
    """Inference on every frame in order.

    Returns the label maps, or ``(labels, logits)`` with ``export_logits``.
    """
    net = _net(checkpoint)
    was_training = net.training
    net.eval()
    frames = torch.from_numpy(series.array())[:, None]
    labels, logits = [], []
    try:
        for i in range(0, len(frames), batch_size):
            z = forward_seg(net, frames[i:i + batch_size]).float().numpy()
            for zi in z:
                lm = LogitMap(zi)
                labels.append(logits_to_labels(lm))
                if export_logits:
                    logits.append(lm)
    finally:
        net.train(was_training)
    return (labels, logits) if export_logits else labels


def score_series(checkpoint, series: TimeSeries, setting: str = "", level: str = "all") -> SubjectScore:
    """Mean Dice over the labeled frames and temporal Dice over the whole series."""
    preds = predict_series(checkpoint, series)
    if series.labels:
        dgt = float(np.mean([dice_coefficient(preds[t], lab) for t, lab in series.labels.items()]))
    else:
        dgt = float("nan")
    return SubjectScore(series.subject_id, dgt, temporal_dice(preds), setting, level)


@torch.no_grad()
def labeled_dice(net, series_list: Iterable[TimeSeries]) -> float:
    """Mean over subjects of the per-subject mean Dice on labeled frames."""
    was_training = net.training
    net.eval()
    per_subject = []
    for s in series_list:
        ts = list(s.labels)
        if not ts:
            continue
        x = torch.from_numpy(np.stack([s.frames[t].data for t in ts]))[:, None]
        pred = forward_seg(net, x, check=False).argmax(1).numpy()
        per_subject.append(np.mean([dice_coefficient(p, s.labels[t]) for p, t in zip(pred, ts)]))
    net.train(was_training)
    return float(np.mean(per_subject)) if per_subject else float("nan")


def export_logits(checkpoint, series: TimeSeries, out_dir: str | Path) -> Path:
    """Write per-frame logits and labels for confidence inspection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels, logits = predict_series(checkpoint, series, export_logits=True)
    for t, (lab, z) in enumerate(zip(labels, logits)):
        save_array(out_dir / f"logits_{t:03d}.raw", z.data, series.spacing)
        save_array(out_dir / f"pred_{t:03d}.raw", lab.data, series.spacing)
    return out_dir


# ---------------------------------------------------------------- grouping and tables

def group_low_high(scores: Sequence[SubjectScore], metric: str, threshold: float,
                   basic_scores: Sequence[SubjectScore]) -> list[SubjectScore]:
    """Assign LOW/HIGH from the Basic model's score of each subject (``>= threshold`` is HIGH)."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    basic = {s.subject_id: getattr(s, metric) for s in basic_scores}
    out = []
    for s in scores:
        if s.subject_id not in basic:
            raise ValueError(f"no Basic score for subject {s.subject_id}")
        group = "HIGH" if basic[s.subject_id] >= threshold else "LOW"
        out.append(replace(s, **{"group_gt" if metric == "dice_gt" else "group_td": group}))
    return out


def assign_groups(scores, basic_scores, dice_threshold=DICE_THRESHOLD, temporal_threshold=TEMPORAL_THRESHOLD):
    scores = group_low_high(scores, "dice_gt", dice_threshold, basic_scores)
    return group_low_high(scores, "temporal_dice", temporal_threshold, basic_scores)


def median_iqr(values) -> tuple[float, float]:
    """Median and Q3 - Q1 with linear-interpolation quantiles; NaN for no data."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(med), float(q3 - q1)


def improvement_table(setting_scores: Sequence[SubjectScore], basic_scores: Sequence[SubjectScore],
                      dice_threshold=DICE_THRESHOLD, temporal_threshold=TEMPORAL_THRESHOLD) -> dict:
    """Median and IQR of per-subject ``setting - basic`` for each metric and group.

    Returns ``{(metric, group): (median, iqr)}``.
    """
    s_map = {s.subject_id: s for s in setting_scores}
    b_map = {s.subject_id: s for s in basic_scores}
    if s_map.keys() != b_map.keys():
        raise ValueError("setting and Basic scores cover different subjects")
    grouped = {s.subject_id: s for s in assign_groups(basic_scores, basic_scores,
                                                       dice_threshold, temporal_threshold)}
    table = {}
    for metric in METRICS:
        gkey = "group_gt" if metric == "dice_gt" else "group_td"
        for group in GROUPS:
            deltas = [getattr(s_map[sid], metric) - getattr(b_map[sid], metric) for sid in sorted(s_map)
                      if group == "ALL" or getattr(grouped[sid], gkey) == group]
            table[(metric, group)] = median_iqr(deltas)
    return table


def summarize(values) -> tuple[float, float] | None:
    """Mean and population standard deviation; ``None`` for an empty cell."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        return None
    return float(v.mean()), float(v.std())


def format_cell(cell, digits: int = 2) -> str:
    if cell is None or any(np.isnan(cell)):
        return "missing"
    return f"{cell[0]:.{digits}f} ± {cell[1]:.{digits}f}"


def summary_table(scores_by_method: dict, levels=LEVELS) -> dict:
    """``{method: {level: (mean, std) | None}}`` of Dice w. ground truth."""
    return {m: {lvl: summarize(s.dice_gt for s in by_level.get(lvl, [])) for lvl in levels}
            for m, by_level in scores_by_method.items()}


# ---------------------------------------------------------------- CSV

SCORE_FIELDS = ("subject_id", "setting", "dice_gt", "temporal_dice", "group_gt", "group_td", "level")


def write_scores(path: str | Path, scores: Iterable[SubjectScore]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_FIELDS)
        for s in scores:
            w.writerow([s.subject_id, s.setting, repr(s.dice_gt), repr(s.temporal_dice),
                        s.group_gt, s.group_td, s.level])
    return path


def read_scores(path: str | Path) -> list[SubjectScore]:
    with Path(path).open() as fh:
        return [SubjectScore(r["subject_id"], float(r["dice_gt"]), float(r["temporal_dice"]),
                             r["setting"], r.get("level", "all"), r.get("group_gt", ""), r.get("group_td", ""))
                for r in csv.DictReader(fh)]


def write_table1(path: str | Path, tables: dict) -> Path:
    """``tables`` maps a row name (e.g. ``"S+T vs. Basic"``) to an improvement table."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["comparison"] + [f"{m}_{g}_{stat}" for m in METRICS for g in GROUPS
                                     for stat in ("median", "iqr")])
        for name, table in tables.items():
            row = [name]
            for m in METRICS:
                for g in GROUPS:
                    row += [repr(table[(m, g)][0]), repr(table[(m, g)][1])]
            w.writerow(row)
    return path


def format_table1(tables: dict) -> str:
    """Median (IQR) per group, one row per comparison; empty groups print as ``-``."""
    head = f"{'':16s}| {'Dice w. ground truth':^50s} | {'Temporal Dice':^50s}"
    sub = f"{'':16s}|" + "".join(f" {g:^16s}" for g in GROUPS) + " |" + "".join(f" {g:^16s}" for g in GROUPS)
    lines = [head, sub]
    for name, t in tables.items():
        cells = ["-" if np.isnan(t[(m, g)][0]) else f"{t[(m, g)][0]:+.4f} ({t[(m, g)][1]:.4f})"
                 for m in METRICS for g in GROUPS]
        lines.append(f"{name:16s}|" + "".join(f" {c:>16s}" for c in cells[:3]) + " |"
                     + "".join(f" {c:>16s}" for c in cells[3:]))
    return "\n".join(lines)


def write_table2(path: str | Path, table: dict, levels=LEVELS) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [f"{lvl}_{stat}" for lvl in levels for stat in ("mean", "std")])
        for method, cells in table.items():
            row = [method]
            for lvl in levels:
                cell = cells.get(lvl)
                row += ["missing", "missing"] if cell is None else [repr(cell[0]), repr(cell[1])]
            w.writerow(row)
    return path


def format_table2(table: dict, levels=LEVELS) -> str:
    lines = [f"{'Method':14s}" + "".join(f" {lvl:>13s}" for lvl in levels)]
    for method, cells in table.items():
        lines.append(f"{method:14s}" + "".join(f" {format_cell(cells.get(lvl)):>13s}" for lvl in levels))
    return "\n".join(lines)
