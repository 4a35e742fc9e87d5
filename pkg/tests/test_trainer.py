import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from crseg.config import ConfigError, ExperimentConfig, desk_profile
from crseg.losses import lambda_schedule
from crseg.models import load_checkpoint, forward_reg, save_checkpoint, init_registration
from crseg.phantom import PhantomConfig, generate_cohort
from crseg.trainer import (Cohort, fold_split, learning_rate_at, load_state, new_state, pseudo_label,
                           sample_batch, save_state, self_train, sweep, train, train_mean_teacher,
                           train_registration, train_step)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _setup(series, config):
    split = fold_split(config, series)
    cohort = Cohort([s for s in series if s.subject_id in split.train_subjects])
    return split, cohort, *cohort.pools(split.train_subjects)


def test_config_validation_and_yaml(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(batch_size=7)
    with pytest.raises(ConfigError):
        ExperimentConfig(delta_t=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(setting="nope")
    cfg = desk_profile(setting="s_plus_t", lambda0=0.001)
    cfg.save(tmp_path / "c.yaml")
    assert ExperimentConfig.from_file(tmp_path / "c.yaml") == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    paper = ExperimentConfig()
    assert (paper.learning_rate, paper.weight_decay, paper.batch_size, paper.delta_t, paper.warmup_epochs,
            paper.epochs) == (1e-4, 1e-5, 16, 5, 10, 5000)


def test_sample_batch_contract(small_series, tiny_config):
    cfg = tiny_config.with_(batch_size=16)
    split, cohort, lab, unl = _setup(small_series, cfg)
    rng = np.random.default_rng(0)
    for _ in range(50):
        b = sample_batch(lab, unl, cohort, cfg, rng)
        assert len(b.labeled) == len(b.unlabeled) == 8
        assert b.x_l.shape == (8, 1, 16, 16, 16) and b.y_l.shape == (8, 16, 16, 16)
        for (s, t), (sp, tp) in zip(b.unlabeled, b.partners):
            assert s == sp and 1 <= abs(t - tp) <= cfg.delta_t
            assert s in split.train_subjects
        assert all(t in cohort.series[s].labels for s, t in b.labeled)
        assert len(b.t_l) == len(b.t_u) == 8


def test_sample_batch_labeled_frequency_uniform(small_series, tiny_config):
    split, cohort, lab, unl = _setup(small_series, tiny_config)
    rng = np.random.default_rng(1)
    counts = dict.fromkeys(lab, 0)
    draws = 0
    for _ in range(1500):
        b = sample_batch(lab, unl, cohort, tiny_config, rng)
        for ref in b.labeled:
            counts[ref] += 1
            draws += 1
    p = 1 / len(lab)
    sigma = math.sqrt(draws * p * (1 - p))
    assert all(abs(c - draws * p) <= 3 * sigma for c in counts.values())


def test_sample_batch_errors(small_series, tiny_config):
    _, cohort, lab, unl = _setup(small_series, tiny_config)
    with pytest.raises(ValueError):
        sample_batch([], unl, cohort, tiny_config, np.random.default_rng(0))


def test_learning_rate_examples():
    cfg = ExperimentConfig(learning_rate=1e-4, warmup_epochs=10, epochs=100)
    assert learning_rate_at(10, cfg) == 1e-4
    assert learning_rate_at(5, cfg) == pytest.approx(5e-5, abs=1e-18)
    assert learning_rate_at(100, cfg) == pytest.approx(0, abs=1e-18)
    assert learning_rate_at(0, cfg) == 0


def test_train_step_basic(small_series, tiny_config):
    _, cohort, lab, unl = _setup(small_series, tiny_config)
    state = new_state(tiny_config, 3)
    assert state.teacher is None
    bd = train_step(state, sample_batch(lab, unl, cohort, tiny_config, state.rng), None, tiny_config)
    assert bd["L_s"] == 0 and bd["L_t"] == 0 and state.step == 1


def test_train_step_s_plus_t_after_ramp(small_series, tiny_config):
    cfg = tiny_config.with_(setting="s_plus_t", lambda0=0.01)
    _, cohort, lab, unl = _setup(small_series, cfg)
    reg = init_registration(4, 2)
    state = new_state(cfg, 3)
    assert state.teacher is not None
    state.step = int(state.ramp_length) + 1
    bd = train_step(state, sample_batch(lab, unl, cohort, cfg, state.rng), reg, cfg)
    assert bd["lambda1"] == bd["lambda2"] == 0.01
    assert bd["L_s"] > 0 and bd["L_t"] > 0


def test_zero_lr_step_moves_only_teacher(small_series, tiny_config):
    cfg = tiny_config.with_(setting="s_plus", learning_rate=0.0, ema_alpha=0.9)
    _, cohort, lab, unl = _setup(small_series, cfg)
    state = new_state(cfg, 3)
    with torch.no_grad():
        for p in state.teacher.model.parameters():
            p.add_(1.0)
    student0 = [p.detach().clone() for p in state.student.parameters()]
    teacher0 = [p.detach().clone() for p in state.teacher.model.parameters()]
    train_step(state, sample_batch(lab, unl, cohort, cfg, state.rng), None, cfg)
    for s0, s1 in zip(student0, state.student.parameters()):
        assert torch.equal(s0, s1)
    for t0, s0, t1 in zip(teacher0, student0, state.teacher.model.parameters()):
        assert torch.allclose(t1, 0.9 * t0 + 0.1 * s0, atol=1e-6)


def test_nonfinite_loss_dumps_batch(small_series, tiny_config, tmp_path):
    _, cohort, lab, unl = _setup(small_series, tiny_config)
    state = new_state(tiny_config, 3)
    with torch.no_grad():
        state.student.head.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        train_step(state, sample_batch(lab, unl, cohort, tiny_config, state.rng), None, tiny_config,
                   dump_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite_batch.json").read_text())
    assert len(dump["labeled"]) == 2


def test_state_round_trip_bit_exact(small_series, tiny_config, tmp_path):
    cfg = tiny_config.with_(setting="s_plus")
    _, cohort, lab, unl = _setup(small_series, cfg)
    a = new_state(cfg, 3)
    train_step(a, sample_batch(lab, unl, cohort, cfg, a.rng), None, cfg)
    save_state(tmp_path / "state.pt", a)
    b = load_state(tmp_path / "state.pt", cfg)
    for st in (a, b):
        train_step(st, sample_batch(lab, unl, cohort, cfg, st.rng), None, cfg)
    for pa, pb in zip(a.student.parameters(), b.student.parameters()):
        assert torch.equal(pa, pb)
    for pa, pb in zip(a.teacher.model.parameters(), b.teacher.model.parameters()):
        assert torch.equal(pa, pb)


def test_train_outputs_and_ramp(small_series, tiny_config):
    cfg = tiny_config.with_(setting="s_plus", epochs=4, lambda0=0.5)
    r = train(cfg, small_series)
    rows = _rows(r.out_dir / "log.csv")
    steps = len(rows)
    assert steps == r.summary["steps"] == 4 * r.summary["steps_per_epoch"]
    L = r.summary["ramp_length"]
    assert L == steps / 2
    for row in rows:
        s = int(row["step"])
        assert float(row["lambda1"]) == lambda_schedule(s, L, 0.5)
        assert float(row["lambda2"]) == 0.0
    assert r.best_val_dice >= r.final_val_dice - 1e-9
    for name in ("config.yaml", "batches.csv", "validation.csv", "best.pt", "final.pt", "summary.json"):
        assert (r.out_dir / name).exists()


def test_setting_s_ignores_unlabeled(small_series, tiny_config):
    r = train(tiny_config.with_(setting="s"), small_series)
    rows = _rows(r.out_dir / "batches.csv")
    assert all(row["used"] == "0" for row in rows if row["role"] != "labeled")
    assert any(row["used"] == "1" for row in rows if row["role"] == "labeled")


def test_missing_registration_checkpoint(small_series, tiny_config):
    with pytest.raises(ConfigError):
        train(tiny_config.with_(setting="s_plus_t"), small_series)
    with pytest.raises(ConfigError):
        train(tiny_config.with_(setting="s_plus_t", reg_checkpoint="/nonexistent.pt"), small_series)


def test_s_plus_t_with_registration_checkpoint(small_series, tiny_config):
    reg_path = train_registration(tiny_config, small_series)
    r = train(tiny_config.with_(setting="s_plus_t", reg_checkpoint=str(reg_path)), small_series)
    assert len(_rows(r.out_dir / "log.csv")) == r.summary["steps"]


def test_registration_checkpoints(small_series, tiny_config):
    zero = tiny_config.with_(reg_epochs=0)
    paths = [train_registration(zero.with_(fold=k), small_series) for k in range(2)]
    assert paths[0] != paths[1] and all(p.exists() for p in paths)
    assert paths[0].name == "registration_fold0.pt"
    net, payload = load_checkpoint(paths[0])
    assert payload["kind"] == "registration" and payload["fold"] == 0
    x = torch.from_numpy(small_series[0].array()[:2])[:, None]
    with torch.no_grad():
        assert forward_reg(net, x[:1], x[1:]).abs().max() == 0


def test_determinism(small_series, tiny_config, tmp_path):
    logs = []
    for i in range(2):
        r = train(tiny_config.with_(setting="s_plus", out_dir=str(tmp_path / f"r{i}")), small_series)
        logs.append((r.out_dir / "log.csv").read_text())
    assert logs[0] == logs[1]


def test_mean_teacher_smoke(small_series, tiny_config):
    r = train_mean_teacher(tiny_config, small_series)
    rows = _rows(r.out_dir / "log.csv")
    assert len(rows) == r.summary["steps"] and r.summary["setting"] == "mean_teacher"
    assert all(set(row) >= {"L_sup", "L_s", "L_t", "lambda1", "lambda2", "total"} for row in rows)


def test_self_training(small_series, tiny_config):
    r = self_train(tiny_config.with_(setting="self_training"), small_series)
    split = fold_split(tiny_config, small_series)
    n_frames = sum(len(s) for s in small_series if s.subject_id in split.train_subjects)
    assert r.summary["labeled_pool"] == n_frames
    assert (r.out_dir / "best.pt").exists() and (r.out_dir / "stage1" / "best.pt").exists()
    assert (r.out_dir / "config.yaml").exists()
    assert json.loads((r.out_dir / "summary.json").read_text())["setting"] == "self_training"
    net, _ = load_checkpoint(r.out_dir / "stage1" / "best.pt")
    pseudo = pseudo_label(net, small_series, split.train_subjects)
    assert all(set(np.unique(lab.data)) <= {0, 1} for lab in pseudo.values())
    with pytest.raises(ConfigError):
        self_train(tiny_config.with_(setting="self_training", stage1_checkpoint="/missing.pt"), small_series)


def test_self_training_without_unlabeled_is_basic(tiny_config, tmp_path):
    series = [s.series for s in generate_cohort(PhantomConfig(grid_size=(16, 16, 16), num_frames=4,
                                                              num_subjects=6, label_fraction=1.0))]
    st = self_train(tiny_config.with_(setting="self_training", out_dir=str(tmp_path / "st")), series)
    basic = train(tiny_config.with_(out_dir=str(tmp_path / "basic")), series)
    assert (st.out_dir / "stage2" / "log.csv").read_text() == (basic.out_dir / "log.csv").read_text()


def test_sweep(small_series, tiny_config):
    cfg = tiny_config.with_(setting="s_plus", epochs=1)
    out = sweep(cfg, (0.01, 0.001), small_series)
    data = json.loads((Path(cfg.out_dir) / "sweep.json").read_text())
    assert set(data["lambda0"]) == {"0.01", "0.001"}
    assert out["best_lambda0"] in (0.01, 0.001)
