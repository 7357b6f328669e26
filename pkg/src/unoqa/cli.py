"""Command-line entry point: ``unoqa <command> [options]``.

Settings come from built-in defaults, then ``--config`` (``key = value``
lines), then explicit flags; later sources win. Exit codes: 0 ok,
2 config error, 3 contract error, 4 numeric error.

Artifacts written under ``--out-dir``:
  model.ckpt          flow model (train)
  threshold.txt       stage-1 threshold (calibrate)
  scores.csv          id,score,grade_stage1 (score)
  representations.uft concatenated likelihood representations (score)
  assignments.csv     id,score,cluster,grade (triage)
  pipeline.ckpt       flow model + reduction model (triage)
  report.txt          key = value metrics: kappa, accuracy, classes,
                      confusion.<class>, precision.<class>, recall.<class>,
                      f1.<class>, and the same keys prefixed stage1. (eval)
  ablation.txt        kappa/accuracy per ablation variant (ablate)
Each CSV/feature artifact has a ``.meta`` sidecar recording its config hash.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .dataset_io import (Manifest, ManifestEntry, QualityGrade, SynthCorpusSpec,
                         generate_synthetic_corpus, read_features, read_manifest, save_image,
                         write_features, write_manifest)
from .encoder import FeaturePyramid
from .errors import ConfigError, MissingArtifactError, UnoqaError
from .evaluation import evaluate_pipeline
from .flow import FlowModel
from .scoring import ThresholdModel, read_scores_csv, write_scores_csv

log = logging.getLogger("unoqa")

# flag name -> config key
CONFIG_FLAGS = {
    "image_size": int, "strides": str, "encoder": str, "features": str, "epochs": int,
    "min_steps": int, "batch_size": int, "lr": float, "aggregation": str, "threshold_mode": str,
    "fdr": str, "fdr_dim": int, "cluster": str, "linkage": str,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    for name, typ in CONFIG_FLAGS.items():
        common.add_argument("--" + name.replace("_", "-"), type=typ, dest=name)

    parser = argparse.ArgumentParser(prog="unoqa", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="write the synthetic three-grade corpus")
    p.add_argument("--count-per-grade", type=int, default=100)
    p.add_argument("--train-count", type=int, default=100)
    p.add_argument("--calib-per-grade", type=int, default=20)

    p = sub.add_parser("train", parents=[common], help="fit the flow on outstanding images")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="fit the stage-1 threshold")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("score", parents=[common], help="stage-1 scores and representations")
    p.add_argument("--manifest", required=True)

    sub.add_parser("triage", parents=[common], help="reduce + cluster the non-outstanding images")

    p = sub.add_parser("eval", parents=[common], help="metrics against a labelled manifest")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("ablate", parents=[common], help="score-only / single-scale / multi-scale comparison")
    p.add_argument("--calib-manifest", required=True)
    p.add_argument("--manifest", required=True)
    return parser


def resolve_config(args) -> pl.PipelineConfig:
    values = pl.read_config_file(args.config) if args.config else {}
    for key in list(CONFIG_FLAGS) + ["seed", "out_dir", "threads"]:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return pl.PipelineConfig.from_mapping(values)


# --- artifact helpers --------------------------------------------------------

class Artifacts:
    def __init__(self, cfg: pl.PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return self.root / name

    def require(self, name, command):
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(p, command)
        return p

    def write_meta(self, name, stage):
        self.path(name + ".meta").write_text(f"config_hash = {self.cfg.stage_hash(stage)}\n", encoding="utf-8")

    def check_meta(self, name, stage, command):
        meta = self.require(name + ".meta", command)
        found = meta.read_text(encoding="utf-8").split("=", 1)[1].strip()
        if found != self.cfg.stage_hash(stage):
            raise ConfigError(f"{name} was produced with a different configuration "
                              f"(hash {found}, current {self.cfg.stage_hash(stage)}); rerun `unoqa {command}`")

    def load_model(self) -> FlowModel:
        model, sections = FlowModel.load(self.require("model.ckpt", "train"))
        found = sections.get(b"HASH", b"").decode()
        if found != self.cfg.stage_hash("train"):
            raise ConfigError(f"model.ckpt was trained with a different configuration "
                              f"(hash {found}, current {self.cfg.stage_hash('train')}); rerun `unoqa train`")
        return model

    def load_threshold(self) -> ThresholdModel:
        text = self.require("threshold.txt", "calibrate").read_text(encoding="utf-8")
        th = ThresholdModel.from_text(text)
        found = dict(l.split(" = ", 1) for l in text.splitlines() if " = " in l).get("config_hash")
        if found != self.cfg.stage_hash("score"):
            raise ConfigError("threshold.txt was calibrated with a different configuration; rerun `unoqa calibrate`")
        return th


# --- commands ----------------------------------------------------------------

def cmd_gen_synth(args, cfg):
    root = Path(cfg.out_dir)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    spec = SynthCorpusSpec(count_per_grade=args.count_per_grade, seed=cfg.seed, size=cfg.image_size)
    images, manifest = generate_synthetic_corpus(spec, prefix="s", stream=0)
    tspec = SynthCorpusSpec(count_per_grade=args.train_count, seed=cfg.seed, size=cfg.image_size,
                            grades=(QualityGrade.OUTSTANDING,))
    timages, tmanifest = generate_synthetic_corpus(tspec, prefix="t", stream=1)
    for im, e in zip(images + timages, list(manifest) + list(tmanifest)):
        save_image(img_dir / f"{e.id}.png", im)

    def rel(m):
        return Manifest([ManifestEntry(e.id, f"images/{e.id}.png", e.label) for e in m])

    per_grade = args.count_per_grade
    if not 0 < args.calib_per_grade < per_grade:
        raise ConfigError("calib-per-grade must lie between 0 and count-per-grade")
    calib = [e for i, e in enumerate(manifest) if i % per_grade < args.calib_per_grade]
    test = [e for i, e in enumerate(manifest) if i % per_grade >= args.calib_per_grade]
    write_manifest(root / "train.csv", rel(tmanifest))
    write_manifest(root / "calib.csv", rel(calib))
    write_manifest(root / "test.csv", rel(test))
    log.info("wrote %d images and train/calib/test manifests to %s", len(images) + len(timages), root)


def cmd_train(args, cfg):
    art = Artifacts(cfg)
    manifest = read_manifest(args.manifest)
    pl.check_training_manifest(manifest)
    model = pl.train_model(pl.load_pyramids(manifest, cfg), cfg)
    model.save(art.path("model.ckpt"), {b"HASH": cfg.stage_hash("train").encode()})


def _score_manifest(manifest, model, cfg):
    return pl.score_pyramids(manifest.ids, pl.load_pyramids(manifest, cfg), model, cfg)


def cmd_calibrate(args, cfg):
    art = Artifacts(cfg)
    model = art.load_model()
    manifest = read_manifest(args.manifest)
    scored = _score_manifest(manifest, model, cfg)
    labels = [e.label for e in manifest]
    th = pl.fit_threshold(scored.scores, labels if cfg.threshold_mode == "f1max" else None, cfg.threshold_mode)
    art.path("threshold.txt").write_text(th.to_text() + f"config_hash = {cfg.stage_hash('score')}\n",
                                         encoding="utf-8")
    log.info("threshold %.6g (%s)", th.tau, th.mode)


def cmd_score(args, cfg):
    art = Artifacts(cfg)
    model = art.load_model()
    th = art.load_threshold()
    manifest = read_manifest(args.manifest)
    scored = _score_manifest(manifest, model, cfg)
    write_scores_csv(art.path("scores.csv"), scored.ids, scored.scores, th)
    art.write_meta("scores.csv", "score")
    reps = [FeaturePyramid([r.reshape(1, 1, -1).astype(np.float32)]) for r in scored.representations]
    write_features(art.path("representations.uft"), reps, scored.ids)
    art.write_meta("representations.uft", "score")


def cmd_triage(args, cfg):
    art = Artifacts(cfg)
    art.require("scores.csv", "score")
    art.check_meta("scores.csv", "score", "score")
    art.check_meta("representations.uft", "score", "score")
    th = art.load_threshold()
    ids, scores, _ = read_scores_csv(art.path("scores.csv"))
    reps, rep_ids = read_features(art.require("representations.uft", "score"))
    if rep_ids != ids:
        raise ConfigError("scores.csv and representations.uft list different samples; rerun `unoqa score`")
    X = np.array([r.scales[0].reshape(-1) for r in reps], dtype=np.float64)
    result = pl.triage(ids, scores, X, th, cfg)
    with open(art.path("assignments.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "score", "cluster", "grade"])
        for sid, s, c, g in zip(result.ids, result.scores, result.clusters, result.grades):
            w.writerow([sid, repr(float(s)), int(c), g.label])
    art.write_meta("assignments.csv", "triage")
    model = art.load_model()
    sections = {b"HASH": cfg.stage_hash("triage").encode()}
    if result.reduction is not None:
        sections[b"FDR1"] = result.reduction.to_bytes()
    model.save(art.path("pipeline.ckpt"), sections)


def read_assignments(path) -> dict[str, QualityGrade]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["id"]: QualityGrade.parse(row["grade"]) for row in csv.DictReader(fh)}


def cmd_eval(args, cfg):
    art = Artifacts(cfg)
    art.check_meta("assignments.csv", "triage", "triage")
    preds = read_assignments(art.require("assignments.csv", "triage"))
    manifest = read_manifest(args.manifest)
    report = evaluate_pipeline(preds, manifest, {"config_hash": cfg.stage_hash("triage"), "seed": str(cfg.seed)})
    art.path("report.txt").write_text(report.to_text(), encoding="utf-8")
    report.write_confusion_csv(art.path("confusion.csv"))
    print(f"kappa = {report.kappa:.2f}  accuracy = {report.accuracy:.2f}  "
          f"stage1 kappa = {report.stage1.kappa:.2f}")


def cmd_ablate(args, cfg):
    art = Artifacts(cfg)
    model = art.load_model()
    calib_m = read_manifest(args.calib_manifest)
    test_m = read_manifest(args.manifest)
    calib = _score_manifest(calib_m, model, cfg)
    test = _score_manifest(test_m, model, cfg)
    result = pl.run_ablation(calib, [e.label for e in calib_m], test, test_m, model, cfg)
    table = result.table()
    art.path("ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")


COMMANDS = {"gen-synth": cmd_gen_synth, "train": cmd_train, "calibrate": cmd_calibrate, "score": cmd_score,
            "triage": cmd_triage, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except UnoqaError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (FileNotFoundError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
