import csv

import numpy as np
import pytest

from crseg.evaluation import (SubjectScore, assign_groups, dice_coefficient, export_logits, format_cell,
                              group_low_high, improvement_table, median_iqr, predict_series, read_scores,
                              summarize, temporal_dice, write_scores)
from crseg.models import init_segmentation, save_checkpoint
from crseg.report import build_report, emit_plots
from crseg.volume import LabelMap, LogitMap, load_array, logits_to_labels


def _mask(idx, n=1000):
    m = np.zeros(n, dtype=np.uint8)
    m[list(idx)] = 1
    return m.reshape(10, 10, 10)


def test_dice_examples():
    a = _mask(range(100))
    assert dice_coefficient(a, a) == 1.0
    assert dice_coefficient(a, _mask(range(100, 200))) == 0.0
    assert dice_coefficient(a, _mask(range(50, 150))) == 0.5
    empty = np.zeros((10, 10, 10))
    assert dice_coefficient(empty, empty) == 1.0
    assert dice_coefficient(empty, a) == 0.0
    assert dice_coefficient(LabelMap(a), LabelMap(a)) == 1.0
    with pytest.raises(ValueError):
        dice_coefficient(a, np.zeros((5, 5, 5)))


def test_dice_symmetric_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.random((5, 5, 5)) > 0.5, rng.random((5, 5, 5)) > 0.6
        assert dice_coefficient(a, b) == dice_coefficient(b, a)


def test_temporal_dice_examples():
    a = _mask(range(100))
    assert temporal_dice([a] * 4) == 1.0
    b = _mask(range(100, 200))
    assert temporal_dice([a, b, a, b]) == 0.0
    c = _mask(range(50, 150))
    # pairwise (1.0, 0.5, 0.0)
    assert temporal_dice([a, a, c, _mask(range(500, 600))]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        temporal_dice([a])


def _scores(values, setting="basic", metric="dice_gt"):
    out = []
    for i, v in enumerate(values):
        kw = {"dice_gt": v, "temporal_dice": 0.9} if metric == "dice_gt" else {"dice_gt": 0.9, "temporal_dice": v}
        out.append(SubjectScore(f"s{i}", setting=setting, **kw))
    return out


def test_grouping_examples():
    basic = _scores([0.85, 0.8, 0.79])
    g = group_low_high(basic, "dice_gt", 0.8, basic)
    assert [s.group_gt for s in g] == ["HIGH", "HIGH", "LOW"]
    basic_t = _scores([0.65], metric="temporal_dice")
    assert group_low_high(basic_t, "temporal_dice", 0.7, basic_t)[0].group_td == "LOW"
    with pytest.raises(ValueError):
        group_low_high(_scores([0.5, 0.6]), "dice_gt", 0.8, basic[:1])


def test_grouping_uses_basic_only():
    basic = _scores([0.9, 0.5])
    other = _scores([0.5, 0.9], setting="s_plus_t")
    g = assign_groups(other, basic)
    assert [s.group_gt for s in g] == ["HIGH", "LOW"]


def test_improvement_examples():
    basic = _scores([0.5, 0.6, 0.9])
    table = improvement_table(basic, basic)
    # the temporal LOW group is empty here and reported as missing
    assert all(np.isnan(v).all() for k, v in table.items() if k == ("temporal_dice", "LOW"))
    assert all(v == (0.0, 0.0) for k, v in table.items() if k != ("temporal_dice", "LOW"))
    ours = _scores([0.51, 0.62, 0.93], setting="s")
    t = improvement_table(ours, basic)
    med, iqr = t[("dice_gt", "ALL")]
    assert med == pytest.approx(0.02) and iqr == pytest.approx(0.01)
    assert t[("dice_gt", "HIGH")][0] == pytest.approx(0.03)
    assert set(g for _, g in t) == {"LOW", "HIGH", "ALL"}
    with pytest.raises(ValueError):
        improvement_table(ours[:2], basic)


def test_median_iqr_empty():
    assert all(np.isnan(v) for v in median_iqr([]))


def test_summarize_examples():
    assert summarize([0.8, 0.8]) == (0.8, 0.0)
    m, s = summarize([0.7, 0.9])
    assert format_cell((m, s)) == "0.80 ± 0.10"
    assert summarize([]) is None and format_cell(None) == "missing"


def test_predict_series_contract(small_series, tmp_path):
    net = init_segmentation(width=4, depth=2, seed=0)
    path = save_checkpoint(tmp_path / "m.pt", net)
    s = small_series[0]
    preds = predict_series(path, s)
    assert len(preds) == len(s)
    again = predict_series(path, s)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(preds, again))
    out = export_logits(path, s, tmp_path / "logits")
    for t in (0, len(s) - 1):
        z, _ = load_array(out / f"logits_{t:03d}.raw")
        lab, _ = load_array(out / f"pred_{t:03d}.raw")
        assert np.array_equal(logits_to_labels(LogitMap(z)).data, lab)
        assert np.array_equal(lab, preds[t].data)


def test_scores_csv_round_trip(tmp_path):
    scores = assign_groups(_scores([0.85, 0.5]), _scores([0.85, 0.5]))
    write_scores(tmp_path / "scores.csv", scores)
    header = (tmp_path / "scores.csv").read_text().splitlines()[0].split(",")
    assert header[:6] == ["subject_id", "setting", "dice_gt", "temporal_dice", "group_gt", "group_td"]
    assert read_scores(tmp_path / "scores.csv") == scores


def _fake_runs():
    rng = np.random.default_rng(0)
    scores = []
    for setting in ("basic", "s", "s_plus", "s_plus_t", "mean_teacher", "self_training"):
        for i in range(6):
            scores.append(SubjectScore(f"p{i}", float(rng.uniform(0.6, 0.95)), float(rng.uniform(0.6, 0.95)),
                                       setting, "all"))
        for level in ("10", "5"):
            for i in range(4):
                scores.append(SubjectScore(f"p{i}", float(rng.uniform(0.6, 0.95)), 0.9, setting, level))
    return scores


def test_report_and_plots(tmp_path):
    res = build_report(_fake_runs(), tmp_path / "report")
    assert set(res["table1"]) == {"S vs. Basic", "S+ vs. Basic", "S+T vs. Basic"}
    t2 = res["table2"]
    assert set(t2) == {"mean teacher", "self-training", "ours"}
    assert all(t2[m][lvl] is not None for m in t2 for lvl in ("all", "10", "5"))
    assert t2["ours"]["60"] is None
    assert "missing" in (tmp_path / "report" / "table2.txt").read_text()
    with open(tmp_path / "report" / "table1.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 4
    info = emit_plots(tmp_path / "report")
    assert info["kde_curves"] == {"dice_gt": 4, "temporal_dice": 4}
    assert info["boxes"] == {"dice_gt": 3, "temporal_dice": 3}
    for name in ("fig2_density.png", "fig3_boxplot.png"):
        assert (tmp_path / "report" / name).stat().st_size > 0
    with open(tmp_path / "report" / "fig2_density.csv") as fh:
        rows = list(csv.DictReader(fh))
    for setting in ("basic", "s", "s_plus", "s_plus_t"):
        assert sum(r["setting"] == setting for r in rows) == 6
