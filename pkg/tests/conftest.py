import time
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from unoqa.dataset_io import QualityGrade, SynthCorpusSpec, generate_synthetic_corpus
from unoqa.pipeline import PipelineConfig, ScoredSet, extract_pyramids, score_pyramids, train_model

settings.register_profile("unoqa", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("unoqa")

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    return pytestconfig.stash[ACCEPTANCE_KEY]


# small, fast configuration shared by unit tests
TINY = PipelineConfig(image_size=64, epochs=2, min_steps=60, batch_size=64, fdr_dim=4)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = SynthCorpusSpec(count_per_grade=8, seed=3, size=64)
    return generate_synthetic_corpus(spec)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    spec = SynthCorpusSpec(count_per_grade=10, seed=3, size=64, grades=(QualityGrade.OUTSTANDING,))
    images, _ = generate_synthetic_corpus(spec, prefix="t", stream=1)
    return train_model(extract_pyramids(images, tiny_cfg), tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _subset(scored, idx):
    return ScoredSet([scored.ids[i] for i in idx], scored.scores[idx],
                     [scored.grids[i] for i in idx], scored.representations[idx])


@pytest.fixture(scope="session")
def benchmark():
    """The synthetic benchmark at default settings.

    100 outstanding training images from their own stream; a 300-image
    labelled corpus split into a 60-image calibration holdout (first 20 per
    grade) and 240 test images.
    """
    cfg = PipelineConfig(seed=0)
    t0 = time.perf_counter()
    train_spec = SynthCorpusSpec(count_per_grade=100, seed=0, grades=(QualityGrade.OUTSTANDING,))
    train_images, _ = generate_synthetic_corpus(train_spec, prefix="t", stream=1)
    model = train_model(extract_pyramids(train_images, cfg), cfg)
    t_train = time.perf_counter() - t0
    images, manifest = generate_synthetic_corpus(SynthCorpusSpec(count_per_grade=100, seed=0))
    scored = score_pyramids(manifest.ids, extract_pyramids(images, cfg), model, cfg)
    labels = [e.label for e in manifest]
    calib_idx = [i for i in range(len(labels)) if i % 100 < 20]
    test_idx = [i for i in range(len(labels)) if i % 100 >= 20]
    calib, test = _subset(scored, calib_idx), _subset(scored, test_idx)
    return SimpleNamespace(
        cfg=cfg, model=model, manifest=manifest, labels=labels, scored=scored,
        calib=calib, calib_labels=[labels[i] for i in calib_idx],
        test=test, test_labels=[labels[i] for i in test_idx], test_manifest=manifest.subset(test.ids),
        seconds=time.perf_counter() - t0, train_seconds=t_train)
