# %% [markdown]
# Macro-F1, multi-seed aggregation and the results table.

# %%
import numpy as np

from ctxgesture import aggregate_runs, confusion_matrix, macro_f1, per_class_f1, render_report
from ctxgesture.evaluation import MultiRunSummary, weighted_f1

labels = [0, 0, 1, 1, 2, 2, 2]
preds = [0, 1, 1, 1, 2, 0, 2]
cm = confusion_matrix(preds, labels, 4)  # class 3 never appears: its F1 is 0
print(cm.m)
print("per class", np.round(per_class_f1(cm), 3))
print("macro", round(macro_f1(cm), 3), "weighted", round(weighted_f1(cm), 3))

# %%
# five seeds: mean and sample std (n - 1)
runs = [0.36, 0.39, 0.35, 0.37, 0.38]
print(aggregate_runs(runs))
print(aggregate_runs([0.4]))  # flagged as a single run

# %%
rows = [
    MultiRunSummary.from_runs("resnet50", "without_context", [{"seed": s, "macro_f1": v} for s, v in enumerate([0.30, 0.33, 0.29])]),
    MultiRunSummary.from_runs("resnet50", "with_context", [{"seed": s, "macro_f1": v} for s, v in enumerate(runs)]),
    MultiRunSummary("swin_v2", "with_context", 18.7, 0.0, 1),
]
print(render_report(rows))
