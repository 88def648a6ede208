"""Confusion matrices, F1 scores, multi-seed aggregation and reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .errors import EmptyInput, IdOutOfRange, LengthMismatch, MalformedReport

BACKBONE_NAMES = {
    "resnet50": "ResNet-50",
    "resnet101": "ResNet-101",
    "hrnet_w32": "HRNet-W32",
    "swin_v2": "SwinV2",
    "tiny_test": "Tiny",
}
VARIANT_NAMES = {"with_context": "With Context", "without_context": "Without Context"}


@dataclass(frozen=True)
class ConfusionMatrix:
    m: np.ndarray  # m[i, j]: true class i predicted as j

    @property
    def num_classes(self):
        return self.m.shape[0]

    @property
    def total(self):
        return int(self.m.sum())


def confusion_matrix(preds, labels, num_classes) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise LengthMismatch(f"{preds.size} predictions vs {labels.size} labels")
    for arr in (preds, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise IdOutOfRange(f"class ids must lie in [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (labels, preds), 1)
    return ConfusionMatrix(m)


def _safe_div(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.divide(a, b, out=np.zeros_like(a), where=b != 0)


def precision_recall(cm: ConfusionMatrix):
    tp = np.diag(cm.m)
    return _safe_div(tp, cm.m.sum(axis=0)), _safe_div(tp, cm.m.sum(axis=1))


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    """Harmonic mean of precision and recall per class; 0/0 counts as 0."""
    p, r = precision_recall(cm)
    return _safe_div(2 * p * r, p + r)


def macro_f1(cm: ConfusionMatrix) -> float:
    return float(np.mean(per_class_f1(cm)))


def weighted_f1(cm: ConfusionMatrix) -> float:
    support = cm.m.sum(axis=1)
    if support.sum() == 0:
        return 0.0
    return float(np.sum(per_class_f1(cm) * support) / support.sum())


class Aggregate(NamedTuple):
    mean: float
    std: float
    single_run: bool


def aggregate_runs(values) -> Aggregate:
    """Mean and sample standard deviation (n - 1); std is 0 for one run."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        raise EmptyInput("no values to aggregate")
    mean = math.fsum(vals) / n
    mean += math.fsum(v - mean for v in vals) / n  # residual correction
    if n == 1:
        return Aggregate(mean, 0.0, True)
    var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
    return Aggregate(mean, math.sqrt(var), False)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    support: np.ndarray
    macro_f1: float
    weighted_f1: float
    variant: str = "with_context"
    seed: int | None = None
    run_id: str = ""

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, **kw):
        p, r = precision_recall(cm)
        return cls(
            confusion=cm.m,
            per_class_precision=p,
            per_class_recall=r,
            per_class_f1=per_class_f1(cm),
            support=cm.m.sum(axis=1),
            macro_f1=macro_f1(cm),
            weighted_f1=weighted_f1(cm),
            **kw,
        )

    def run_record(self, average="macro"):
        score = self.macro_f1 if average == "macro" else self.weighted_f1
        return {
            "seed": self.seed,
            "macro_f1": score,
            "per_class_f1": self.per_class_f1.tolist(),
            "confusion": self.confusion.tolist(),
        }


@dataclass
class MultiRunSummary:
    backbone: str
    variant: str
    mean_f1: float  # percent
    std_f1: float  # percent
    n_runs: int
    per_run: list = field(default_factory=list)

    @property
    def single_run(self):
        return self.n_runs == 1

    @classmethod
    def from_runs(cls, backbone, variant, per_run):
        agg = aggregate_runs([r["macro_f1"] for r in per_run])
        return cls(backbone, variant, 100 * agg.mean, 100 * agg.std, len(per_run), list(per_run))


def summarize_reports(backbone, variant, reports, average="macro") -> MultiRunSummary:
    return MultiRunSummary.from_runs(backbone, variant, [r.run_record(average) for r in reports])


def merge_summaries(rows) -> list[MultiRunSummary]:
    """Pool per-run records of rows sharing (backbone, variant)."""
    groups = {}
    for row in rows:
        groups.setdefault((row.backbone, row.variant), []).append(row)
    out = []
    for (backbone, variant), members in groups.items():
        runs = [r for m in members for r in m.per_run]
        if runs:
            out.append(MultiRunSummary.from_runs(backbone, variant, runs))
        else:
            out.extend(members)
    return out


def _cell(row: MultiRunSummary):
    s = f"{row.mean_f1:.1f} ± {row.std_f1:.1f}"
    return s + " (single run)" if row.single_run else s


def render_report(rows, format="markdown") -> str:
    rows = list(rows)
    if not rows:
        raise EmptyInput("no rows to render")
    if format == "json":
        return json.dumps([asdict(r) for r in rows], indent=2)
    if format != "markdown":
        raise ValueError(f"unknown format {format!r}")
    lines = ["| Backbone | Variant | Test-F1 |", "|---|---|---|"]
    for r in rows:
        name = BACKBONE_NAMES.get(r.backbone, r.backbone)
        lines.append(f"| {name} | {VARIANT_NAMES.get(r.variant, r.variant)} | {_cell(r)} |")
    return "\n".join(lines) + "\n"


def parse_report_json(text) -> list[MultiRunSummary]:
    doc = json.loads(text)
    if isinstance(doc, dict):
        doc = [doc]
    keys = {"backbone", "variant", "mean_f1", "std_f1", "n_runs"}
    rows = []
    for d in doc:
        if not isinstance(d, dict) or not keys <= set(d):
            raise MalformedReport(f"report rows need keys {sorted(keys)}")
        rows.append(MultiRunSummary(**{k: d[k] for k in keys}, per_run=d.get("per_run", [])))
    return rows


@torch.no_grad()
def predict_split(model, manifest, split, cfg=None, ablate_context=False, batch_size=32):
    """(predictions, labels) for every instance of ``split`` in eval mode."""
    from .data import GestureDataset

    cfg = cfg or model.preprocess
    if cfg is None:
        raise ValueError("no preprocessing config: pass cfg or train the model first")
    ds = GestureDataset(manifest, split, cfg, augment=False)
    was_training = model.training
    model.eval()
    preds, labels = [], []
    try:
        for crop, context, y in torch.utils.data.DataLoader(ds, batch_size=batch_size, shuffle=False):
            logits = model(crop, context, ablate_context=ablate_context)
            preds.append(logits.argmax(dim=1))
            labels.append(y)
    finally:
        model.train(was_training)
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return torch.cat(preds).numpy(), torch.cat(labels).numpy()


def evaluate_split(model, manifest, split, variant=None, cfg=None, seed=None, batch_size=32) -> MetricsReport:
    """Deterministic metrics over every instance of ``split``.

    ``variant='without_context'`` on a with-context model zeroes its context
    features; a model built without context is already the ablation.
    """
    variant = variant or model.variant
    if variant == "with_context" and not model.use_context:
        raise ValueError("model was built without a context branch")
    if variant not in VARIANT_NAMES:
        raise ValueError(f"unknown variant {variant!r}")
    ablate = variant == "without_context" and model.use_context
    preds, labels = predict_split(model, manifest, split, cfg, ablate, batch_size)
    cm = confusion_matrix(preds, labels, model.num_classes)
    return MetricsReport.from_confusion(cm, variant=variant, seed=seed, run_id=f"{split}")
