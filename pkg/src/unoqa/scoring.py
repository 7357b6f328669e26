"""Likelihood grids, image-level low-quality scores and the stage-1 threshold."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataset_io import resize_bilinear
from .encoder import FeaturePyramid
from .errors import ConfigError, DegenerateError
from .flow import FlowModel

log = logging.getLogger(__name__)


@dataclass
class LikelihoodGrid:
    k: int
    values: np.ndarray  # (H_k, W_k) log-likelihoods


@dataclass
class ThresholdModel:
    tau: float
    mode: str  # "f1max" or "otsu"
    f1: Optional[float] = None
    fallback: bool = False

    def predict(self, scores) -> np.ndarray:
        """True where the image is predicted non-outstanding."""
        return np.asarray(scores, dtype=np.float64) > self.tau

    def to_text(self) -> str:
        lines = [f"tau = {self.tau!r}", f"mode = {self.mode}", f"fallback = {int(self.fallback)}"]
        if self.f1 is not None:
            lines.append(f"f1 = {self.f1!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ThresholdModel":
        kv = dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)
        f1 = float(kv["f1"]) if "f1" in kv else None
        return cls(float(kv["tau"]), kv["mode"], f1, bool(int(kv.get("fallback", "0"))))


def likelihood_grids(pyramid: FeaturePyramid, model: FlowModel) -> list[LikelihoodGrid]:
    expected = model.pyramid.shapes()
    if pyramid.shapes != expected:
        raise ConfigError(f"pyramid shapes {pyramid.shapes} do not match the model's {expected}")
    return [LikelihoodGrid(k, model.scale_log_likelihood(k, fmap)) for k, fmap in enumerate(pyramid.scales)]


def anomaly_map(grids: Sequence[LikelihoodGrid], model: FlowModel) -> np.ndarray:
    """Sum over scales of normalised negative log-likelihood, on the finest grid."""
    target = max((g.values.shape for g in grids), key=lambda s: s[0] * s[1])
    total = np.zeros(target)
    for g in grids:
        dec = model.decoders[g.k]
        if not dec.ll_std > 0:
            raise DegenerateError(f"scale {g.k}: training log-likelihood has zero spread")
        a = (dec.ll_mean - g.values) / dec.ll_std
        total += resize_bilinear(a, *target)
    return total


def image_score(grids: Sequence[LikelihoodGrid], model: FlowModel, aggregation: str = "max") -> float:
    amap = anomaly_map(grids, model)
    if aggregation == "max":
        return float(amap.max())
    if aggregation == "mean":
        return float(amap.mean())
    raise ConfigError(f"unknown score aggregation {aggregation!r}")


def f1_score(scores: np.ndarray, positive: np.ndarray, tau: float) -> float:
    pred = scores > tau
    tp = int(np.sum(pred & positive))
    fp = int(np.sum(pred & ~positive))
    fn = int(np.sum(~pred & positive))
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def calibrate_threshold(scores, non_outstanding) -> ThresholdModel:
    """Pick the threshold maximising F1 of the non-outstanding class.

    Candidates are the midpoints between consecutive distinct scores plus
    +-inf; ties go to the larger threshold. Falls back to Otsu when only
    one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(non_outstanding, dtype=bool)
    if len(scores) != len(positive):
        raise ValueError("scores and labels differ in length")
    if positive.all() or not positive.any():
        log.warning("calibration labels contain a single class; using Otsu threshold")
        model = otsu_threshold(scores)
        model.fallback = True
        return model
    u = np.unique(scores)
    candidates = np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])
    best_tau, best_f1 = None, -1.0
    for tau in candidates:
        f1 = f1_score(scores, positive, tau)
        if f1 >= best_f1:
            best_tau, best_f1 = float(tau), f1
    return ThresholdModel(best_tau, "f1max", best_f1)


def otsu_threshold(scores, bins: int = 256) -> ThresholdModel:
    """Threshold at the histogram bin edge with the largest between-class variance."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < 2 or scores.min() == scores.max():
        raise DegenerateError("Otsu threshold needs at least two distinct scores")
    counts, edges = np.histogram(scores, bins=bins)
    centres = (edges[:-1] + edges[1:]) / 2.0
    p = counts / counts.sum()
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * centres)[:-1]
    total_mean = np.sum(p * centres)
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (total_mean * w0 - m0) ** 2 / (w0 * w1)
    between[(w0 <= 0) | (w1 <= 0)] = -1.0
    cut = int(np.argmax(between))
    return ThresholdModel(float(edges[cut + 1]), "otsu")


def write_scores_csv(path, ids: Sequence[str], scores: Sequence[float], threshold: ThresholdModel) -> None:
    pred = threshold.predict(scores)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "score", "grade_stage1"])
        for sid, s, p in zip(ids, scores, pred):
            w.writerow([sid, repr(float(s)), "non-outstanding" if p else "outstanding"])


def read_scores_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Returns ids, scores and a boolean non-outstanding flag per row."""
    ids, scores, flags = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["id"])
            scores.append(float(row["score"]))
            flags.append(row["grade_stage1"] == "non-outstanding")
    return ids, np.asarray(scores), np.asarray(flags, dtype=bool)
