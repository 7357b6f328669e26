"""End-to-end orchestration: features, flow training, scoring, triage, ablation."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fdr
from .clustering import assign_grades, fit_clusters
from .dataset_io import GrayImage, Manifest, QualityGrade, load_image, read_features
from .encoder import FeaturePyramid, PyramidConfig, extract_stat_pyramid, pyramid_from_external
from .errors import ConfigError, ContractError
from .evaluation import EvalReport, evaluate_pipeline
from .flow import FlowConfig, FlowModel, PositionalEncodingConfig, TrainConfig, train
from .representation import build_representation, scale_slices
from .scoring import ThresholdModel, calibrate_threshold, image_score, likelihood_grids, otsu_threshold

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    image_size: int = 320
    strides: str = "8,16,32"
    encoder: str = "stat"
    features: str = ""
    pe_dim: int = 32
    pe_base: float = 10000.0
    blocks: int = 4
    hidden_mult: int = 2
    clamp: float = 1.9
    init_std: float = 0.01
    epochs: int = 10
    min_steps: int = 6000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    aggregation: str = "max"
    threshold_mode: str = "f1max"
    fdr: str = "pca"
    fdr_dim: int = 16
    cluster: str = "hierarchy"
    linkage: str = "ward"
    out_dir: str = "."
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        choices = {"encoder": ("stat", "external"), "aggregation": ("max", "mean"),
                   "threshold_mode": ("f1max", "otsu"), "fdr": ("pca", "nmf", "none"),
                   "cluster": ("kmeans", "hierarchy", "gmm"), "linkage": ("ward", "average", "complete")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.encoder == "external" and not self.features:
            raise ConfigError("encoder = external needs a features file")
        self.pyramid_config  # validates strides against the image size

    @property
    def pyramid_config(self) -> PyramidConfig:
        try:
            strides = tuple(int(s) for s in str(self.strides).split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"strides must be comma-separated integers, got {self.strides!r}") from None
        if self.encoder == "external" and self.features:
            dims = tuple(s[2] for s in _external_shapes(self.features))
            return PyramidConfig(strides, self.image_size, dims)
        return PyramidConfig(strides, self.image_size)

    @property
    def flow_config(self) -> FlowConfig:
        return FlowConfig(self.blocks, self.hidden_mult, self.clamp, self.init_std,
                          PositionalEncodingConfig(self.pe_dim, self.pe_base))

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.min_steps, self.batch_size, self.lr, seed=self.seed)

    # keys that feed each stage, cumulative
    STAGE_KEYS = {
        "train": ("image_size", "strides", "encoder", "pe_dim", "pe_base", "blocks", "hidden_mult",
                  "clamp", "init_std", "epochs", "min_steps", "batch_size", "lr", "seed"),
        "score": ("aggregation", "threshold_mode"),
        "triage": ("fdr", "fdr_dim", "cluster", "linkage"),
    }

    def stage_hash(self, stage: str) -> str:
        keys = []
        for name, ks in self.STAGE_KEYS.items():
            keys += ks
            if name == stage:
                break
        text = "\n".join(f"{k}={getattr(self, k)!r}" for k in sorted(keys))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict, base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            conv = {"int": int, "float": float}.get(types[key], str)
            try:
                changes[key] = conv(raw) if isinstance(raw, str) else raw
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for {key}") from None
        return dataclasses.replace(base, **changes)


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected `key = value`")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _external_shapes(path):
    pyramids, _ = read_features(path)
    return pyramids[0].shapes if pyramids else []


# --- features ----------------------------------------------------------------

def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def extract_pyramids(images: Sequence[GrayImage], cfg: PipelineConfig) -> list[FeaturePyramid]:
    pc = cfg.pyramid_config
    return _pmap(lambda im: extract_stat_pyramid(im, pc), images, cfg.threads)


def load_pyramids(manifest: Manifest, cfg: PipelineConfig) -> list[FeaturePyramid]:
    """Pyramids for every manifest entry, in manifest order."""
    if cfg.encoder == "external":
        pyramids, ids = read_features(cfg.features)
        by_id = dict(zip(ids, pyramids))
        missing = [sid for sid in manifest.ids if sid not in by_id]
        if missing:
            raise ContractError(f"feature file lacks {len(missing)} id(s): {', '.join(missing[:10])}")
        pc = cfg.pyramid_config
        return [pyramid_from_external(by_id[sid], pc) for sid in manifest.ids]
    images = _pmap(lambda e: load_image(e.path, cfg.image_size), list(manifest), cfg.threads)
    return extract_pyramids(images, cfg)


def check_training_manifest(manifest: Manifest) -> None:
    bad = [e.id for e in manifest if e.label not in (None, QualityGrade.OUTSTANDING)]
    if bad:
        raise ContractError(f"training manifest must hold outstanding images only; "
                            f"{len(bad)} other label(s), e.g. {', '.join(bad[:5])}")


def train_model(pyramids: Sequence[FeaturePyramid], cfg: PipelineConfig) -> FlowModel:
    return train(pyramids, cfg.pyramid_config, cfg.train_config, cfg.flow_config)


# --- scoring -----------------------------------------------------------------

@dataclass
class ScoredSet:
    ids: list[str]
    scores: np.ndarray
    grids: list  # per image: list of LikelihoodGrid
    representations: np.ndarray  # (n, sum H_k W_k)


def score_pyramids(ids: Sequence[str], pyramids: Sequence[FeaturePyramid], model: FlowModel,
                   cfg: PipelineConfig) -> ScoredSet:
    grids = _pmap(lambda p: likelihood_grids(p, model), pyramids, cfg.threads)
    scores = np.array([image_score(g, model, cfg.aggregation) for g in grids])
    reps = np.array([build_representation(g, model).features for g in grids])
    return ScoredSet(list(ids), scores, grids, reps)


def fit_threshold(scores, labels: Optional[Sequence[Optional[QualityGrade]]], mode: str) -> ThresholdModel:
    if mode == "otsu":
        return otsu_threshold(scores)
    if labels is None or any(l is None for l in labels):
        raise ContractError("f1max calibration needs a label for every calibration image")
    return calibrate_threshold(scores, [l is not QualityGrade.OUTSTANDING for l in labels])


# --- triage ------------------------------------------------------------------

@dataclass
class TriageResult:
    ids: list[str]
    scores: np.ndarray
    clusters: np.ndarray  # -1 for stage-1 outstanding
    grades: list[QualityGrade]
    reduction: Optional[fdr.ReductionModel] = None
    cluster_model: Optional[object] = None

    def as_dict(self) -> dict[str, QualityGrade]:
        return dict(zip(self.ids, self.grades))


def triage(ids: Sequence[str], scores, representations: np.ndarray, threshold: ThresholdModel,
           cfg: PipelineConfig, reduce: Optional[bool] = None,
           columns: Optional[slice] = None) -> TriageResult:
    """Stage-1 split by score, then FDR + 2-clustering of the non-outstanding."""
    scores = np.asarray(scores, dtype=np.float64)
    reduce = cfg.fdr != "none" if reduce is None else reduce
    non = threshold.predict(scores)
    clusters = np.full(len(ids), -1)
    grades = [QualityGrade.OUTSTANDING] * len(ids)
    idx = np.flatnonzero(non)
    X = np.asarray(representations, dtype=np.float64)[idx]
    if columns is not None:
        X = X[:, columns]
    reduction = cmodel = None
    if len(idx) < 2:
        log.warning("only %d non-outstanding image(s); marking them gradable without clustering", len(idx))
        for i in idx:
            grades[i] = QualityGrade.GRADABLE
            clusters[i] = 0
        return TriageResult(list(ids), scores, clusters, grades)
    if reduce:
        d = min(cfg.fdr_dim, len(idx) - 1 if cfg.fdr == "pca" else len(idx), X.shape[1])
        if d < cfg.fdr_dim:
            log.warning("reducing to %d dims instead of %d (only %d samples)", d, cfg.fdr_dim, len(idx))
        reduction = fdr.fit_reduction(X, cfg.fdr if cfg.fdr != "none" else "pca", d, seed=cfg.seed)
        X = reduction.scores
    cmodel = fit_clusters(X, cfg.cluster, seed=cfg.seed, linkage=cfg.linkage)
    ga = assign_grades(cmodel, X, [ids[i] for i in idx], scores[idx])
    for i, c, g in zip(idx, ga.clusters, ga.grades):
        clusters[i] = c
        grades[i] = g
    return TriageResult(list(ids), scores, clusters, grades, reduction, cmodel)


def score_only_triage(ids, scores, tau_outstanding: float, tau_ungradable: float) -> TriageResult:
    """Three grades from the scalar score alone via two thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    grades = [QualityGrade.OUTSTANDING if s <= tau_outstanding
              else QualityGrade.UNGRADABLE if s > tau_ungradable
              else QualityGrade.GRADABLE for s in scores]
    clusters = np.array([-1 if g is QualityGrade.OUTSTANDING else int(g is QualityGrade.UNGRADABLE)
                         for g in grades])
    return TriageResult(list(ids), scores, clusters, grades)


# --- ablation ----------------------------------------------------------------

@dataclass
class AblationResult:
    reports: dict[str, EvalReport] = field(default_factory=dict)

    def kappa(self, name: str) -> float:
        return self.reports[name].kappa

    def best_single(self, reduced: bool) -> tuple[str, float]:
        names = [n for n in self.reports if n.startswith("single-") and n.endswith("+fdr") == reduced]
        best = max(names, key=self.kappa)
        return best, self.kappa(best)

    def table(self) -> str:
        lines = [f"{'variant':<20} {'kappa':>8} {'acc':>8}"]
        for name, r in self.reports.items():
            lines.append(f"{name:<20} {r.kappa:8.2f} {r.accuracy:8.2f}")
        return "\n".join(lines) + "\n"


def run_ablation(calib: ScoredSet, calib_labels, test: ScoredSet, test_manifest: Manifest,
                 model: FlowModel, cfg: PipelineConfig) -> AblationResult:
    """Score-only, single-scale (with/without FDR) and multi-scale (with/without FDR)."""
    threshold = fit_threshold(calib.scores, calib_labels, cfg.threshold_mode)
    result = AblationResult()
    non = [i for i, l in enumerate(calib_labels) if l is not QualityGrade.OUTSTANDING]
    second = calibrate_threshold(calib.scores[non], [calib_labels[i] is QualityGrade.UNGRADABLE for i in non])
    tri = score_only_triage(test.ids, test.scores, threshold.tau, second.tau)
    result.reports["score-only"] = evaluate_pipeline(tri.as_dict(), test_manifest)
    for k, sl in enumerate(scale_slices(model), 1):
        for reduce in (False, True):
            tri = triage(test.ids, test.scores, test.representations, threshold, cfg, reduce=reduce, columns=sl)
            result.reports[f"single-{k}" + ("+fdr" if reduce else "")] = evaluate_pipeline(tri.as_dict(), test_manifest)
    for reduce in (False, True):
        tri = triage(test.ids, test.scores, test.representations, threshold, cfg, reduce=reduce)
        result.reports["multi" + ("+fdr" if reduce else "")] = evaluate_pipeline(tri.as_dict(), test_manifest)
    return result
