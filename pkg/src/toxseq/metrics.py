"""ROC-AUC, RMSE, accuracy and per-task evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .model import CLASSIFICATION, predict_many


class MetricError(ValueError):
    pass


class SingleClass(MetricError):
    pass


class LengthMismatch(MetricError):
    pass


class Empty(MetricError):
    pass


class NothingEvaluable(MetricError):
    pass


class ReportFormatError(MetricError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"lengths differ: {a.size} vs {b.size}")
    return a, b


def roc_auc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg) from midranks; ties count one half."""
    s, y = _pair(scores, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC-AUC needs both classes")
    ranks = rankdata(s, method="average")
    # midranks are multiples of 0.5, so 2*U is an exact integer in float64
    u2 = 2.0 * ranks[pos].sum() - n_pos * (n_pos + 1)
    return float(u2 / (2.0 * n_pos * n_neg))


def rmse(preds, targets) -> float:
    p, t = _pair(preds, targets)
    if p.size == 0:
        raise Empty("RMSE of an empty list")
    d = p - t
    return float(math.sqrt(np.mean(d * d)))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s, y = _pair(scores, labels)
    if s.size == 0:
        raise Empty("accuracy of an empty list")
    return float(np.mean((s >= threshold).astype(np.float64) == y))


@dataclass
class EvalReport:
    per_task: list  # [(task, metric, value)]
    mean: float
    std: float
    n_records: int
    skipped: list = field(default_factory=list)
    accuracy: dict = field(default_factory=dict)

    @property
    def metric(self) -> str:
        return self.per_task[0][1]

    def value(self, task: str) -> float:
        for name, _, v in self.per_task:
            if name == task:
                return v
        raise KeyError(task)

    def to_json(self) -> str:
        obj = {
            "tasks": [{"name": n, "metric": m, "value": v} for n, m, v in self.per_task],
            "mean": self.mean,
            "std": self.std,
            "n_records": self.n_records,
            "skipped": list(self.skipped),
        }
        return json.dumps(obj, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "metric", "value"])
        for n, m, v in self.per_task:
            w.writerow([n, m, repr(v)])
        w.writerow(["__mean__", self.metric, repr(self.mean)])
        w.writerow(["__std__", self.metric, repr(self.std)])
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        try:
            obj = json.loads(text)
            per_task = [(t["name"], t["metric"], float(t["value"])) for t in obj["tasks"]]
            report = cls(
                per_task=per_task,
                mean=float(obj["mean"]),
                std=float(obj["std"]),
                n_records=int(obj["n_records"]),
                skipped=list(obj.get("skipped", [])),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ReportFormatError(f"malformed report: {exc}") from None
        if not per_task:
            raise ReportFormatError("report has no tasks")
        return report

    def summary(self) -> str:
        return f"{self.metric} mean {self.mean:.4f} ± {self.std:.4f} over {len(self.per_task)} task(s)"


def aggregate(per_task, n_records: int, skipped=(), acc=None) -> EvalReport:
    if not per_task:
        raise NothingEvaluable("no task could be evaluated")
    values = np.array([v for _, _, v in per_task])
    return EvalReport(
        per_task=list(per_task),
        mean=float(values.mean()),
        std=float(values.std()),  # population std
        n_records=n_records,
        skipped=list(skipped),
        accuracy=dict(acc or {}),
    )


def score_records(preds, records, schema) -> EvalReport:
    """Per-task metric over unmasked labels given a (n, n_tasks) prediction array."""
    if len(records) == 0:
        raise NothingEvaluable("no records")
    preds = np.asarray(preds, dtype=np.float64).reshape(len(records), schema.n_tasks)
    labels = np.array([r.labels for r in records]).reshape(len(records), schema.n_tasks)
    mask = np.array([r.mask for r in records]).reshape(len(records), schema.n_tasks)
    per_task, skipped, acc = [], [], {}
    for j, name in enumerate(schema.task_names):
        m = mask[:, j]
        if schema.kind == CLASSIFICATION:
            try:
                value = roc_auc(preds[m, j], labels[m, j])
            except SingleClass:
                skipped.append(name)
                continue
            per_task.append((name, "roc_auc", value))
            acc[name] = accuracy(preds[m, j], labels[m, j])
        else:
            if not m.any():
                skipped.append(name)
                continue
            per_task.append((name, "rmse", rmse(preds[m, j], labels[m, j])))
    return aggregate(per_task, len(records), skipped, acc)


def evaluate(model, records, schema) -> EvalReport:
    if tuple(model.task_names) != tuple(schema.task_names):
        raise NothingEvaluable(
            f"model tasks {model.task_names} do not match dataset tasks {schema.task_names}"
        )
    if len(records) == 0:
        raise NothingEvaluable("no records")
    return score_records(predict_many(model, [r.smiles for r in records]), records, schema)
