"""Confusion matrices, support-weighted F1 and grouped averages.

Precision, recall and F1 that would divide by zero are defined as 0.
Class weights in the weighted F1 are gold-label supports.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import UsageError


def _as_labels(gold, pred) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(gold, dtype=np.int64).reshape(-1)
    p = np.asarray(pred, dtype=np.int64).reshape(-1)
    if g.shape != p.shape:
        raise UsageError(f"gold has {g.size} labels but pred has {p.size}")
    if g.size == 0:
        raise UsageError("need at least one scored sample")
    return g, p


def confusion(gold: Sequence[int], pred: Sequence[int], n_classes: int | None = None) -> np.ndarray:
    """C x C counts; entry (i, j) is the number of gold-i samples predicted j."""
    g, p = _as_labels(gold, pred)
    if n_classes is None:
        n_classes = int(max(g.max(), p.max())) + 1
    if min(g.min(), p.min()) < 0 or max(g.max(), p.max()) >= n_classes:
        raise UsageError(f"class index outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (g, p), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


@dataclass
class F1Report:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]

    @property
    def weighted_f1(self) -> float:
        total = sum(self.support)
        if total == 0:
            return 0.0
        return float(sum(s / total * f for s, f in zip(self.support, self.f1)))


def per_class_f1(cm) -> F1Report:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support.astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return F1Report(precision.tolist(), recall.tolist(), f1.tolist(), support.tolist())


def weighted_f1(gold, pred, n_classes: int | None = None) -> float:
    return per_class_f1(confusion(gold, pred, n_classes)).weighted_f1


def average_weighted_f1(scores: Sequence[float]) -> float:
    scores = list(scores)
    if not scores:
        raise UsageError("cannot average an empty list of scores")
    return float(sum(scores) / len(scores))


def accuracy(gold, pred) -> float:
    g, p = _as_labels(gold, pred)
    return float(np.count_nonzero(g == p) / g.size)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_FORMAT = "sefusion-eval"


@dataclass
class EvalReport:
    """Weighted-F1 per sub-task and split, plus group averages.

    ``scores[task][split]`` mirrors the per-sub-task columns of a results
    table; ``averages[group][split]`` holds the average-weighted-F1.
    """

    scores: dict[str, dict[str, float]] = field(default_factory=dict)
    averages: dict[str, dict[str, float]] = field(default_factory=dict)
    accuracy: dict[str, dict[str, float]] = field(default_factory=dict)

    def add_group_average(self, group: str, tasks: Sequence[str]) -> None:
        splits = [s for s in ("train", "validation", "test") if all(s in self.scores.get(t, {}) for t in tasks)]
        self.averages[group] = {s: average_weighted_f1([self.scores[t][s] for t in tasks]) for s in splits}

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, "version": 1, **asdict(self)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if obj.get("format") != REPORT_FORMAT:
            raise UsageError(f"{path} is not an evaluation report")
        return cls(obj.get("scores", {}), obj.get("averages", {}), obj.get("accuracy", {}))

    def merge(self, other: "EvalReport") -> "EvalReport":
        for src, dst in ((other.scores, self.scores), (other.averages, self.averages), (other.accuracy, self.accuracy)):
            for key, per in src.items():
                dst.setdefault(key, {}).update(per)
        return self

    def format_table(self, digits: int = 4) -> str:
        splits = ("train", "validation", "test")
        head = f"{'sub-task':<9}" + "".join(f"{s:>12}" for s in splits)
        lines = ["weighted-F1", head]
        for task, per in self.scores.items():
            lines.append(f"{task:<9}" + "".join(f"{per[s]:>12.{digits}f}" if s in per else f"{'-':>12}" for s in splits))
        if self.averages:
            lines.append("average-weighted-F1")
            for group, per in self.averages.items():
                lines.append(f"{group:<9}" + "".join(f"{per[s]:>12.{digits}f}" if s in per else f"{'-':>12}" for s in splits))
        return "\n".join(lines)

