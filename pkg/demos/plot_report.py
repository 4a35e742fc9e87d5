"""
Tables and figures from per-subject scores
==========================================

The report step only needs ``scores.csv`` files. Here they are made up so the
script runs instantly; after real runs use ``crseg eval`` on each checkpoint and
point ``crseg report`` at the directory that holds them.
"""

import numpy as np

from crseg.evaluation import SubjectScore, write_scores
from crseg.report import build_report, emit_plots

rng = np.random.default_rng(0)
base = rng.uniform(0.6, 0.95, 12)
shift = {"basic": 0.0, "s": 0.01, "s_plus": 0.015, "s_plus_t": 0.02, "mean_teacher": 0.005,
         "self_training": 0.0}
for setting, delta in shift.items():
    levels = ("all", "10", "5") if setting in ("mean_teacher", "self_training", "s_plus_t") else ("all",)
    for level in levels:
        noise = rng.normal(0, 0.01, base.size)
        scores = [SubjectScore(f"phantom-{i:03d}", float(min(b + delta + e, 1.0)),
                               float(min(b + 2 * delta, 1.0)), setting, level)
                  for i, (b, e) in enumerate(zip(base, noise))]
        write_scores(f"demo_runs/report_inputs/{setting}_{level}/scores.csv", scores)

# %%
from crseg.report import collect_scores

result = build_report(collect_scores("demo_runs/report_inputs"), "demo_runs/report")
print(open("demo_runs/report/table1.txt").read())
print(open("demo_runs/report/table2.txt").read())

# %%
# Density curves and LOW/HIGH/ALL boxplots, with their data as CSV.
print(emit_plots("demo_runs/report"))
