"""Training loops: ablation settings, EMA teacher, registration pretraining,
mean-teacher and self-training baselines, and the lambda sweep.

A run directory holds ``log.csv`` (one row per optimizer step),
``batches.csv`` (which frames each step drew), ``validation.csv``,
``best.pt`` / ``final.pt`` and ``summary.json``.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig
from .evaluation import labeled_dice
from .losses import combined_loss
from .models import (TeacherState, UNet3D, UNetConfig, ema_update, forward_reg, init_registration,
                     init_segmentation, load_checkpoint, save_checkpoint)
from .transforms import PairedTransform, sample_transform
from .volume import DatasetSplit, LabelMap, TimeSeries, load_cohort, make_folds, subsample_split
from .warp import registration_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "lr", "L_sup", "L_s", "L_t", "lambda1", "lambda2", "total")

# (spatial scope, temporal term, consistency kind)
SETTING_TERMS = {
    "basic": (None, False, None),
    "s": ("labeled", False, "transform"),
    "s_plus": ("all", False, "transform"),
    "s_plus_t": ("all", True, "transform"),
    "mean_teacher": ("all", False, "mean_teacher"),
    "self_training": (None, False, None),
}


# ---------------------------------------------------------------- data

class Cohort:
    """Frames and labels of a set of subjects as tensors, keyed by subject id."""

    def __init__(self, series: list[TimeSeries], extra_labels: dict | None = None):
        self.series = {s.subject_id: s for s in series}
        self.frames = {s.subject_id: torch.from_numpy(s.array())[:, None] for s in series}
        self.labels = {s.subject_id: {t: torch.from_numpy(lab.data.astype(np.int64))
                                      for t, lab in s.labels.items()} for s in series}
        for (sid, t), lab in (extra_labels or {}).items():
            self.labels[sid][t] = torch.from_numpy(np.asarray(lab.data if isinstance(lab, LabelMap) else lab,
                                                              dtype=np.int64))
        self.shape = next(iter(self.series.values())).shape

    def pools(self, subjects, pseudo: dict | None = None) -> tuple[list, list]:
        """Labeled (true + pseudo) and unlabeled ``(subject, frame)`` lists for ``subjects``."""
        labeled, unlabeled = [], []
        for sid in subjects:
            s = self.series[sid]
            for t in range(len(s)):
                if t in s.labels or (pseudo and (sid, t) in pseudo):
                    labeled.append((sid, t))
                else:
                    unlabeled.append((sid, t))
        return labeled, unlabeled


@dataclass
class Batch:
    labeled: list
    unlabeled: list
    partners: list
    t_l: list[PairedTransform]
    t_u: list[PairedTransform]
    x_l: torch.Tensor
    y_l: torch.Tensor
    x_u: torch.Tensor | None
    x_p: torch.Tensor | None

    @property
    def u_subjects(self):
        return [s for s, _ in self.unlabeled]

    @property
    def p_subjects(self):
        return [s for s, _ in self.partners]


def sample_batch(labeled_pool, unlabeled_pool, cohort: Cohort, config: ExperimentConfig,
                 rng: np.random.Generator) -> Batch:
    """Equal-sized labeled and unlabeled halves, temporal partners and transforms.

    Draws are made in a fixed order regardless of the setting so that runs
    differing only in loss terms see the same data stream.
    """
    if not labeled_pool:
        raise ValueError("labeled pool is empty")
    half = config.batch_size // 2
    labeled = [labeled_pool[i] for i in rng.integers(0, len(labeled_pool), half)]
    unlabeled, partners = [], []
    if unlabeled_pool:
        unlabeled = [unlabeled_pool[i] for i in rng.integers(0, len(unlabeled_pool), half)]
        for sid, t in unlabeled:
            n = len(cohort.series[sid])
            cand = [u for u in range(max(0, t - config.delta_t), min(n, t + config.delta_t + 1)) if u != t]
            if not cand:
                raise ValueError(f"{sid} has no partner frame within delta_t={config.delta_t} of {t}")
            partners.append((sid, cand[int(rng.integers(0, len(cand)))]))
    shape = cohort.shape
    t_l = [sample_transform(rng, shape, config.transforms) for _ in labeled]
    t_u = [sample_transform(rng, shape, config.transforms) for _ in unlabeled]
    x_l = torch.stack([cohort.frames[s][t] for s, t in labeled])
    y_l = torch.stack([cohort.labels[s][t] for s, t in labeled])
    x_u = torch.stack([cohort.frames[s][t] for s, t in unlabeled]) if unlabeled else None
    x_p = torch.stack([cohort.frames[s][t] for s, t in partners]) if partners else None
    return Batch(labeled, unlabeled, partners, t_l, t_u, x_l, y_l, x_u, x_p)


# ---------------------------------------------------------------- schedules and state

def learning_rate_at(epoch: float, config: ExperimentConfig) -> float:
    """Linear warmup from 0, then cosine annealing to 0 at ``config.epochs``."""
    lr, w, total = config.learning_rate, config.warmup_epochs, config.epochs
    if epoch < w:
        return lr * epoch / w
    if total <= w:
        return lr
    frac = min((epoch - w) / (total - w), 1.0)
    return lr * 0.5 * (1 + math.cos(math.pi * frac))


@dataclass
class TrainState:
    student: UNet3D
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    teacher: TeacherState | None = None
    step: int = 0
    steps_per_epoch: int = 1
    total_steps: int = 1

    @property
    def ramp_length(self) -> float:
        return max(self.total_steps / 2, 1e-12)


def new_state(config: ExperimentConfig, steps_per_epoch: int) -> TrainState:
    student = init_segmentation(UNetConfig(1, 2, config.seg_width, config.seg_depth), seed=config.seed)
    optimizer = torch.optim.Adam(student.parameters(), lr=config.learning_rate,
                                 weight_decay=config.weight_decay)
    teacher = None
    scope, _, kind = SETTING_TERMS[config.setting]
    if kind == "mean_teacher" or (scope is not None and config.teacher_student):
        teacher = TeacherState.from_student(student, config.ema_alpha)
    return TrainState(student, optimizer, np.random.default_rng(config.seed), teacher, 0,
                      steps_per_epoch, max(config.epochs * steps_per_epoch, 1))


def save_state(path: str | Path, state: TrainState) -> Path:
    payload = {"student": state.student.state_dict(), "optimizer": state.optimizer.state_dict(),
               "teacher": state.teacher.model.state_dict() if state.teacher else None,
               "step": state.step, "rng": state.rng.bit_generator.state,
               "steps_per_epoch": state.steps_per_epoch, "total_steps": state.total_steps}
    torch.save(payload, path)
    return Path(path)


def load_state(path: str | Path, config: ExperimentConfig) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    state = new_state(config, payload["steps_per_epoch"])
    state.student.load_state_dict(payload["student"])
    state.optimizer.load_state_dict(payload["optimizer"])
    if state.teacher is not None:
        state.teacher.model.load_state_dict(payload["teacher"])
    state.rng.bit_generator.state = payload["rng"]
    state.step = payload["step"]
    state.total_steps = payload["total_steps"]
    return state


def _reg_callable(reg_net):
    if reg_net is None or not isinstance(reg_net, torch.nn.Module):
        return reg_net
    reg_net.eval()
    for p in reg_net.parameters():
        p.requires_grad_(False)
    return lambda fixed, moving: forward_reg(reg_net, fixed, moving, check=False)


def train_step(state: TrainState, batch: Batch, reg_net, config: ExperimentConfig,
               dump_dir: str | Path | None = None) -> dict:
    """One optimizer step on the student, then the EMA update; returns the loss breakdown."""
    scope, temporal, kind = SETTING_TERMS[config.setting]
    lr = learning_rate_at(state.step / state.steps_per_epoch, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.student.train()
    reference = state.teacher.model if state.teacher is not None else state.student
    total, breakdown = combined_loss(
        batch, state.student, reference, _reg_callable(reg_net), state.step, state.ramp_length,
        lambda1=config.spatial_weight if scope else 0.0,
        lambda2=config.temporal_weight if temporal else 0.0,
        spatial_scope=scope, temporal=temporal, consistency=kind or "transform")
    if not torch.isfinite(total):
        info = {"step": state.step, "breakdown": breakdown, "labeled": batch.labeled,
                "unlabeled": batch.unlabeled, "partners": batch.partners}
        if dump_dir is not None:
            Path(dump_dir, "nonfinite_batch.json").write_text(json.dumps(info, indent=1, default=str))
        raise FloatingPointError(f"non-finite loss at step {state.step}: {info}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    if state.teacher is not None:
        ema_update(state.teacher, state.student)
    state.step += 1
    breakdown["lr"] = lr
    return breakdown


# ---------------------------------------------------------------- run setup

@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path
    final_checkpoint: Path
    best_val_dice: float
    final_val_dice: float
    summary: dict = field(default_factory=dict)


def load_data(config: ExperimentConfig, series: list[TimeSeries] | None = None) -> list[TimeSeries]:
    if series is not None:
        return list(series)
    if config.data_dir is None:
        raise ConfigError("no data_dir configured and no series given")
    return load_cohort(config.data_dir)


def fold_split(config: ExperimentConfig, series: list[TimeSeries]) -> DatasetSplit:
    ids = [s.subject_id for s in series]
    splits = make_folds(ids, config.num_folds, config.fold_seed, config.val_fraction)
    if not 0 <= config.fold < len(splits):
        raise ConfigError(f"fold {config.fold} outside 0..{len(splits) - 1}")
    return subsample_split(splits[config.fold], config.subsample, config.fold_seed)


def _load_reg(config: ExperimentConfig, reg_net):
    if reg_net is not None:
        return reg_net
    if not config.reg_checkpoint or not Path(config.reg_checkpoint).exists():
        raise ConfigError(f"setting {config.setting} needs a registration checkpoint "
                          f"(reg_checkpoint={config.reg_checkpoint!r})")
    net, payload = load_checkpoint(config.reg_checkpoint)
    if payload.get("kind") != "registration":
        raise ConfigError(f"{config.reg_checkpoint} is not a registration checkpoint")
    return net


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _run(config: ExperimentConfig, series: list[TimeSeries], split: DatasetSplit, out_dir: Path,
         reg_net=None, pseudo_labels: dict | None = None) -> TrainResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    _, temporal, _ = SETTING_TERMS[config.setting]
    if temporal:
        reg_net = _load_reg(config, reg_net)
    cohort = Cohort([s for s in series if s.subject_id in set(split.train_subjects)], pseudo_labels)
    labeled_pool, unlabeled_pool = cohort.pools(split.train_subjects, pseudo_labels)
    val_series = [s for s in series if s.subject_id in set(split.val_subjects)]
    half = config.batch_size // 2
    steps_per_epoch = max(1, math.ceil(len(labeled_pool) / half))
    state = new_state(config, steps_per_epoch)
    total_steps = config.epochs * steps_per_epoch

    config.save(out_dir / "config.yaml")
    best_dice, best_sd, best_step = -math.inf, None, 0
    final_dice = float("nan")
    uses_unlabeled = config.setting in ("s_plus", "s_plus_t", "mean_teacher")
    with open(out_dir / "log.csv", "w", newline="") as lf, open(out_dir / "batches.csv", "w", newline="") as bf, \
            open(out_dir / "validation.csv", "w", newline="") as vf:
        lw, bw, vw = csv.writer(lf), csv.writer(bf), csv.writer(vf)
        lw.writerow(LOG_FIELDS)
        bw.writerow(("step", "role", "subject", "frame", "used"))
        vw.writerow(("epoch", "step", "val_dice"))
        for step in range(total_steps):
            batch = sample_batch(labeled_pool, unlabeled_pool, cohort, config, state.rng)
            bd = train_step(state, batch, reg_net, config, dump_dir=out_dir)
            lw.writerow([step, _fmt(step / steps_per_epoch)] + [_fmt(bd[k]) for k in LOG_FIELDS[2:]])
            for role, refs in (("labeled", batch.labeled), ("unlabeled", batch.unlabeled),
                               ("partner", batch.partners)):
                used = role == "labeled" or (uses_unlabeled and (role == "unlabeled" or temporal))
                for sid, t in refs:
                    bw.writerow((step, role, sid, t, int(used)))
            end_of_epoch = (step + 1) % steps_per_epoch == 0
            epoch = (step + 1) // steps_per_epoch
            if end_of_epoch and (epoch % config.val_every == 0 or step + 1 == total_steps):
                if val_series:
                    d = labeled_dice(state.student, val_series)
                    vw.writerow((epoch, step + 1, _fmt(d)))
                    final_dice = d
                    if d > best_dice:
                        best_dice, best_step = d, step + 1
                        best_sd = copy.deepcopy(state.student.state_dict())
    if best_sd is None:
        best_sd, best_step = copy.deepcopy(state.student.state_dict()), state.step
        best_dice = final_dice
    extra = {"setting": config.setting, "fold": split.fold_id, "config": config.to_dict()}
    final_path = save_checkpoint(out_dir / "final.pt", state.student, step=state.step,
                                 val_dice=final_dice, **extra)
    best_net = copy.deepcopy(state.student)
    best_net.load_state_dict(best_sd)
    best_path = save_checkpoint(out_dir / "best.pt", best_net, step=best_step, val_dice=best_dice, **extra)
    save_state(out_dir / "state.pt", state)
    summary = {"setting": config.setting, "fold": split.fold_id, "seed": config.seed,
               "lambda0": config.lambda0, "steps": total_steps, "steps_per_epoch": steps_per_epoch,
               "ramp_length": state.ramp_length, "labeled_pool": len(labeled_pool),
               "unlabeled_pool": len(unlabeled_pool), "best_val_dice": best_dice, "best_step": best_step,
               "final_val_dice": final_dice, "train_subjects": list(split.train_subjects),
               "val_subjects": list(split.val_subjects), "test_subjects": list(split.test_subjects)}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return TrainResult(out_dir, best_path, final_path, best_dice, final_dice, summary)


# ---------------------------------------------------------------- public entry points

def train(config: ExperimentConfig, series: list[TimeSeries] | None = None, reg_net=None) -> TrainResult:
    """Train one setting on one fold. ``self_training`` is delegated to :func:`self_train`."""
    if config.setting == "self_training":
        return self_train(config, series)
    series = load_data(config, series)
    return _run(config, series, fold_split(config, series), Path(config.out_dir), reg_net)


def train_mean_teacher(config: ExperimentConfig, series=None) -> TrainResult:
    return train(config.with_(setting="mean_teacher"), series)


def pseudo_label(net: UNet3D, series: list[TimeSeries], subjects) -> dict:
    """Argmax predictions for every unlabeled frame of ``subjects``."""
    from .evaluation import predict_series

    out = {}
    for s in series:
        if s.subject_id not in set(subjects):
            continue
        preds = predict_series(net, s)
        for t in s.unlabeled_indices:
            out[(s.subject_id, t)] = preds[t]
    return out


def self_train(config: ExperimentConfig, series: list[TimeSeries] | None = None) -> TrainResult:
    """Stage 1: Basic on labeled frames. Stage 2: Basic on labeled + pseudo-labeled frames."""
    series = load_data(config, series)
    split = fold_split(config, series)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.yaml")
    if config.stage1_checkpoint is not None:
        if not Path(config.stage1_checkpoint).exists():
            raise ConfigError(f"stage-1 checkpoint {config.stage1_checkpoint} does not exist")
        stage1, _ = load_checkpoint(config.stage1_checkpoint)
    else:
        r1 = _run(config.with_(setting="basic"), series, split, out_dir / "stage1")
        stage1, _ = load_checkpoint(r1.best_checkpoint)
    pseudo = pseudo_label(stage1, series, split.train_subjects)
    result = _run(config.with_(setting="basic"), series, split, out_dir / "stage2", pseudo_labels=pseudo)
    result.summary.update(setting="self_training", pseudo_labels=len(pseudo))
    (result.out_dir / "summary.json").write_text(json.dumps(result.summary, indent=1))
    for name in ("best.pt", "final.pt"):
        payload = torch.load(result.out_dir / name, weights_only=False)
        payload["setting"] = "self_training"
        torch.save(payload, out_dir / name)
    (out_dir / "summary.json").write_text(json.dumps(result.summary, indent=1))
    return TrainResult(out_dir, out_dir / "best.pt", out_dir / "final.pt", result.best_val_dice,
                       result.final_val_dice, result.summary)


def sweep(config: ExperimentConfig, lambda0s=(0.01, 0.001, 0.0001), series=None) -> dict:
    """Train one run per lambda0 and keep the best by validation Dice."""
    series = load_data(config, series)
    results = {}
    for lam in lambda0s:
        sub = config.with_(lambda0=float(lam), out_dir=str(Path(config.out_dir) / f"lambda0_{lam:g}"))
        results[lam] = train(sub, series)
    best = max(results, key=lambda k: results[k].best_val_dice)
    summary = {"lambda0": {f"{k:g}": r.best_val_dice for k, r in results.items()},
               "best_lambda0": best, "best_checkpoint": str(results[best].best_checkpoint)}
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(config.out_dir) / "sweep.json").write_text(json.dumps(summary, indent=1))
    return {"results": results, "best_lambda0": best}


def sample_registration_pair(series: list[TimeSeries], rng: np.random.Generator):
    s = series[int(rng.integers(0, len(series)))]
    t0, t1 = rng.choice(len(s), size=2, replace=False)
    return s, int(t0), int(t1)


def train_registration(config: ExperimentConfig, series: list[TimeSeries] | None = None) -> Path:
    """Fit the registration network on frame pairs of the fold's training subjects.

    Writes ``registration_fold{K}.pt`` and ``registration_fold{K}.csv`` into
    ``config.out_dir`` and returns the checkpoint path.
    """
    series = load_data(config, series)
    split = fold_split(config, series)
    train_series = [s for s in series if s.subject_id in set(split.train_subjects)]
    frames = {s.subject_id: torch.from_numpy(s.array())[:, None] for s in train_series}
    net = init_registration(config.reg_width, config.reg_depth, seed=config.seed)
    opt = torch.optim.Adam(net.parameters(), lr=config.reg_learning_rate)
    rng = np.random.default_rng([config.seed, config.fold, 7])
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    window = (config.reg_window,) * 3
    steps = config.reg_epochs * config.reg_steps_per_epoch
    with open(out_dir / f"registration_fold{config.fold}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "loss"))
        for step in range(steps):
            fixed, moving = [], []
            for _ in range(config.reg_batch_size):
                s, t0, t1 = sample_registration_pair(train_series, rng)
                fixed.append(frames[s.subject_id][t0])
                moving.append(frames[s.subject_id][t1])
            fixed, moving = torch.stack(fixed), torch.stack(moving)
            field_ = forward_reg(net, fixed, moving, check=False)
            loss = registration_loss(fixed, moving, field_, config.reg_lambda, window)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite registration loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            w.writerow((step, _fmt(loss.item())))
    net.eval()
    return save_checkpoint(out_dir / f"registration_fold{config.fold}.pt", net, kind="registration",
                           fold=config.fold, steps=steps, train_subjects=list(split.train_subjects))

