"""Confusion matrices, Cohen's kappa and the pipeline evaluation report."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataset_io import Manifest, QualityGrade
from .errors import ContractError

GRADES = tuple(QualityGrade)
STAGE1_CLASSES = ("outstanding", "non-outstanding")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted
    classes: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(true, pred, classes: Optional[Sequence] = None) -> ConfusionMatrix:
    true, pred = list(true), list(pred)
    if len(true) != len(pred):
        raise ValueError(f"{len(true)} true labels but {len(pred)} predictions")
    if not true:
        raise ValueError("confusion matrix needs at least one sample")
    if classes is None:
        classes = GRADES if all(isinstance(t, QualityGrade) for t in true + pred) else sorted(set(true) | set(pred))
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(true, pred):
        counts[index[t], index[p]] += 1
    names = tuple(c.label if isinstance(c, QualityGrade) else str(c) for c in classes)
    return ConfusionMatrix(counts, names)


def cohen_kappa(cm: ConfusionMatrix | np.ndarray) -> float:
    """Unweighted Cohen's kappa in percent."""
    counts = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    total = counts.sum()
    if counts.size == 0 or total <= 0:
        raise ValueError("kappa of an empty confusion matrix")
    # count form: exact for integer matrices, so perfect agreement gives 100.0
    chance = float(np.sum(counts.sum(axis=1) * counts.sum(axis=0)))
    if chance == total ** 2:
        return 0.0
    return float(100.0 * (total * np.trace(counts) - chance) / (total ** 2 - chance))


def accuracy(cm: ConfusionMatrix) -> float:
    return float(100.0 * np.trace(cm.counts) / cm.total)


def per_class(cm: ConfusionMatrix) -> dict[str, dict[str, float]]:
    c = cm.counts.astype(np.float64)
    out = {}
    for i, name in enumerate(cm.classes):
        tp = c[i, i]
        prec = tp / c[:, i].sum() if c[:, i].sum() else 0.0
        rec = tp / c[i, :].sum() if c[i, :].sum() else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out[name] = {"precision": float(prec), "recall": float(rec), "f1": float(f1)}
    return out


@dataclass
class EvalReport:
    kappa: float
    accuracy: float
    per_class: dict[str, dict[str, float]]
    confusion: ConfusionMatrix
    stage1: Optional["EvalReport"] = None
    metadata: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in sorted(self.metadata.items())]
        lines += self._lines("")
        if self.stage1 is not None:
            lines += self.stage1._lines("stage1.")
        return "\n".join(lines) + "\n"

    def _lines(self, prefix):
        lines = [f"{prefix}kappa = {self.kappa!r}", f"{prefix}accuracy = {self.accuracy!r}",
                 f"{prefix}classes = {','.join(self.confusion.classes)}"]
        for i, name in enumerate(self.confusion.classes):
            lines.append(f"{prefix}confusion.{name} = {','.join(str(int(x)) for x in self.confusion.counts[i])}")
        for name, m in self.per_class.items():
            for key in ("precision", "recall", "f1"):
                lines.append(f"{prefix}{key}.{name} = {m[key]!r}")
        return lines

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)
        report = cls._parse(kv, "")
        if "stage1.kappa" in kv:
            report.stage1 = cls._parse(kv, "stage1.")
        reserved = ("kappa", "accuracy", "classes", "confusion.", "precision.", "recall.", "f1.", "stage1.")
        report.metadata = {k: v for k, v in kv.items() if not k.startswith(reserved)}
        return report

    @classmethod
    def _parse(cls, kv, prefix):
        classes = tuple(kv[f"{prefix}classes"].split(","))
        counts = np.array([[int(x) for x in kv[f"{prefix}confusion.{c}"].split(",")] for c in classes])
        pc = {c: {m: float(kv[f"{prefix}{m}.{c}"]) for m in ("precision", "recall", "f1")} for c in classes}
        return cls(float(kv[f"{prefix}kappa"]), float(kv[f"{prefix}accuracy"]), pc,
                   ConfusionMatrix(counts, classes))

    def write_confusion_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.confusion.classes])
            for name, row in zip(self.confusion.classes, self.confusion.counts):
                w.writerow([name, *(int(x) for x in row)])


def report_from(cm: ConfusionMatrix, metadata=None) -> EvalReport:
    return EvalReport(cohen_kappa(cm), accuracy(cm), per_class(cm), cm, metadata=dict(metadata or {}))


def evaluate_pipeline(predictions: Mapping[str, QualityGrade], manifest: Manifest,
                      metadata: Optional[dict] = None) -> EvalReport:
    """3-grade report plus the binary outstanding / non-outstanding report.

    Only manifest entries carrying a label are scored; each of them must
    have a prediction.
    """
    labelled = [e for e in manifest if e.label is not None]
    missing = [e.id for e in labelled if e.id not in predictions]
    if missing:
        raise ContractError(f"no prediction for {len(missing)} sample(s): {', '.join(missing[:10])}")
    if not labelled:
        raise ContractError("manifest carries no labels to evaluate against")
    true = [e.label for e in labelled]
    pred = [predictions[e.id] for e in labelled]
    report = report_from(confusion(true, pred, GRADES), metadata)

    def binary(g):
        return STAGE1_CLASSES[g is not QualityGrade.OUTSTANDING]

    report.stage1 = report_from(confusion([binary(t) for t in true], [binary(p) for p in pred], STAGE1_CLASSES))
    return report
