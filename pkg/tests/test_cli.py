import logging

import pytest

from unoqa.cli import main, resolve_config, build_parser
from unoqa.dataset_io import QualityGrade, read_manifest
from unoqa.evaluation import EvalReport

SMALL = ["--image-size", "64", "--epochs", "2", "--min-steps", "60", "--batch-size", "64", "--fdr-dim", "3"]


def run(out, *argv):
    return main([*argv, "--out-dir", str(out), *SMALL])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert run(out, "gen-synth", "--count-per-grade", "8", "--train-count", "10", "--calib-per-grade", "3") == 0
    for argv in (["train", "--manifest", str(out / "train.csv")],
                 ["calibrate", "--manifest", str(out / "calib.csv")],
                 ["score", "--manifest", str(out / "test.csv")],
                 ["triage"],
                 ["eval", "--manifest", str(out / "test.csv")]):
        assert run(out, *argv) == 0, argv
    return out


def test_pipeline_writes_every_artifact(workdir):
    for name in ("model.ckpt", "threshold.txt", "scores.csv", "scores.csv.meta", "representations.uft",
                 "assignments.csv", "pipeline.ckpt", "report.txt", "confusion.csv"):
        assert (workdir / name).exists(), name
    test = read_manifest(workdir / "test.csv")
    assert len(test) == 15 and {e.label for e in test} == set(QualityGrade)
    assert len(read_manifest(workdir / "calib.csv")) == 9
    rows = (workdir / "assignments.csv").read_text().splitlines()
    assert rows[0] == "id,score,cluster,grade" and len(rows) == 16
    report = EvalReport.from_text((workdir / "report.txt").read_text())
    assert report.confusion.total == 15 and -100 <= report.kappa <= 100


def test_ablate_prints_table(workdir, capsys):
    assert run(workdir, "ablate", "--calib-manifest", str(workdir / "calib.csv"),
               "--manifest", str(workdir / "test.csv")) == 0
    table = capsys.readouterr().out
    for name in ("score-only", "single-1", "single-3+fdr", "multi", "multi+fdr"):
        assert name in table
    assert (workdir / "ablation.txt").read_text() == table


def test_rerunning_triage_is_byte_identical(workdir):
    before = (workdir / "assignments.csv").read_bytes(), (workdir / "pipeline.ckpt").read_bytes()
    assert run(workdir, "triage") == 0
    assert ((workdir / "assignments.csv").read_bytes(), (workdir / "pipeline.ckpt").read_bytes()) == before


def test_config_hash_mismatch_is_a_config_error(workdir, caplog):
    with caplog.at_level(logging.ERROR):
        assert run(workdir, "score", "--manifest", str(workdir / "test.csv"), "--lr", "0.5") == 2
    assert "rerun `unoqa train`" in caplog.text
    # triage-stage changes invalidate only downstream artifacts
    assert run(workdir, "eval", "--manifest", str(workdir / "test.csv"), "--cluster", "gmm") == 2


def test_missing_artifact_exit_code(tmp_path, caplog):
    with caplog.at_level(logging.ERROR):
        assert run(tmp_path, "triage") == 3
    assert "scores.csv" in caplog.text


def test_training_on_graded_images_is_rejected(workdir, tmp_path):
    assert run(tmp_path, "train", "--manifest", str(workdir / "test.csv")) == 3


def test_bad_config_values(tmp_path):
    assert run(tmp_path, "gen-synth", "--fdr", "ica") == 2
    (tmp_path / "c.cfg").write_text("not a setting\n")
    assert run(tmp_path, "gen-synth", "--config", str(tmp_path / "c.cfg")) == 2
    with pytest.raises(SystemExit):
        main(["train"])  # --manifest is required


def test_flags_override_config_file(tmp_path):
    (tmp_path / "c.cfg").write_text("fdr = nmf\nfdr_dim = 5\ncluster = gmm\n")
    args = build_parser().parse_args(["triage", "--config", str(tmp_path / "c.cfg"), "--fdr-dim", "7"])
    cfg = resolve_config(args)
    assert (cfg.fdr, cfg.fdr_dim, cfg.cluster) == ("nmf", 7, "gmm")
    assert cfg.linkage == "ward"  # untouched keys keep their defaults
