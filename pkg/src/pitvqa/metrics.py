"""Imbalance-aware classification metrics computed from one confusion matrix.

Classes with no ground-truth support are left out of every macro average,
so chance level for a constant predictor over k present classes is 1/k.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "accuracy",
        "balanced_accuracy",
        "macro_recall",
        "macro_fscore",
        "per_class",
        "per_category",
        "confusion",
    ],
    "properties": {
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "balanced_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "macro_recall": {"type": "number", "minimum": 0, "maximum": 1},
        "macro_fscore": {"type": "number", "minimum": 0, "maximum": 1},
        "n_samples": {"type": "integer", "minimum": 1},
        "per_class": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["class", "support", "recall", "precision", "f1"],
                "properties": {
                    "class": {"type": "integer", "minimum": 0},
                    "name": {"type": "string"},
                    "support": {"type": "integer", "minimum": 0},
                    "recall": {"type": "number", "minimum": 0, "maximum": 1},
                    "precision": {"type": "number", "minimum": 0, "maximum": 1},
                    "f1": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "per_category": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["support", "accuracy", "balanced_accuracy"],
                "properties": {
                    "support": {"type": "integer", "minimum": 1},
                    "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                    "balanced_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
    },
}

ABLATION_SCHEMA = {
    "type": "object",
    "required": ["eb_on", "eb_off", "delta", "seed", "steps"],
    "properties": {
        "eb_on": REPORT_SCHEMA,
        "eb_off": REPORT_SCHEMA,
        "delta": {
            "type": "object",
            "required": ["accuracy", "balanced_accuracy", "macro_recall", "macro_fscore"],
            "additionalProperties": {"type": "number"},
        },
        "seed": {"type": "integer"},
        "steps": {"type": "integer", "minimum": 0},
        "neutral_gap": {"type": "number", "minimum": 0},
    },
}

HEADLINE = ("accuracy", "balanced_accuracy", "macro_recall", "macro_fscore")


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """``M[i, j]`` counts samples of true class i predicted as j."""
    y = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y.shape != p.shape:
        raise ValueError(f"{y.size} labels but {p.size} predictions")
    for arr, what in ((y, "label"), (p, "prediction")):
        bad = arr[(arr < 0) | (arr >= n_classes)]
        if bad.size:
            raise IndexError(f"{what} {int(bad[0])} outside [0, {n_classes})")
    return np.bincount(y * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


@dataclass
class ClassStats:
    support: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    f1: np.ndarray


def class_stats(cm: np.ndarray) -> ClassStats:
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return ClassStats(support, recall, precision, f1)


def summary(cm: np.ndarray) -> dict[str, float]:
    """Accuracy, balanced accuracy, macro recall and macro F1 of ``cm``."""
    total = cm.sum()
    if total == 0:
        raise ValueError("cannot score an empty confusion matrix")
    st = class_stats(cm)
    present = st.support > 0
    bacc = float(st.recall[present].mean())
    return {
        "accuracy": float(np.trace(cm) / total),
        "balanced_accuracy": bacc,
        "macro_recall": bacc,
        "macro_fscore": float(st.f1[present].mean()),
    }


@dataclass
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    macro_recall: float
    macro_fscore: float
    n_samples: int
    per_class: list[dict]
    per_category: dict[str, dict]
    confusion: list[list[int]] = field(repr=False)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def build_report(
    y_true,
    y_pred,
    n_classes: int,
    categories: Sequence[str] | None = None,
    class_names: Sequence[str] | None = None,
) -> MetricsReport:
    y = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if y.size == 0:
        raise ValueError("cannot evaluate an empty sample set")
    cm = confusion_matrix(y, p, n_classes)
    head = summary(cm)
    st = class_stats(cm)
    per_class = []
    for c in range(n_classes):
        row = {
            "class": c,
            "support": int(st.support[c]),
            "recall": float(st.recall[c]),
            "precision": float(st.precision[c]),
            "f1": float(st.f1[c]),
        }
        if class_names is not None:
            row["name"] = class_names[c]
        per_class.append(row)
    per_category = {}
    if categories is not None:
        cats = np.asarray(categories)
        for cat in dict.fromkeys(categories):
            sel = cats == cat
            sub = summary(confusion_matrix(y[sel], p[sel], n_classes))
            per_category[str(cat)] = {
                "support": int(sel.sum()),
                "accuracy": sub["accuracy"],
                "balanced_accuracy": sub["balanced_accuracy"],
            }
    return MetricsReport(
        n_samples=int(y.size),
        per_class=per_class,
        per_category=per_category,
        confusion=cm.tolist(),
        **head,
    )


def majority_baseline(y_train, y_eval, n_classes: int) -> dict[str, float]:
    """Scores of always predicting the most frequent training class."""
    top = int(np.bincount(np.asarray(y_train, dtype=np.int64), minlength=n_classes).argmax())
    y = np.asarray(y_eval, dtype=np.int64)
    return summary(confusion_matrix(y, np.full_like(y, top), n_classes))


def validate_report(doc: dict, schema: dict = REPORT_SCHEMA) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` does not match ``schema``."""
    import jsonschema

    jsonschema.validate(doc, schema)


def format_table(report: dict, class_names: Sequence[str] | None = None) -> str:
    """Plain-text rendering: headline metrics, per-category, supported classes."""
    lines = [f"{k:<20}{report[k]:.4f}" for k in HEADLINE]
    if report.get("per_category"):
        lines += ["", f"{'category':<14}{'support':>8}{'acc':>9}{'b.acc':>9}"]
        for cat, row in report["per_category"].items():
            lines.append(f"{cat:<14}{row['support']:>8}{row['accuracy']:>9.4f}{row['balanced_accuracy']:>9.4f}")
    lines += ["", f"{'class':<28}{'support':>8}{'recall':>9}{'prec':>9}{'f1':>9}"]
    for row in report["per_class"]:
        if row["support"] == 0:
            continue
        name = row.get("name") or (class_names[row["class"]] if class_names else str(row["class"]))
        lines.append(
            f"{name[:27]:<28}{row['support']:>8}{row['recall']:>9.4f}{row['precision']:>9.4f}{row['f1']:>9.4f}"
        )
    return "\n".join(lines)


def format_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "name", "support", "recall", "precision", "f1"])
    for r in report["per_class"]:
        w.writerow([r["class"], r.get("name", ""), r["support"], r["recall"], r["precision"], r["f1"]])
    return buf.getvalue()
