import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import exhaustive_best_f1
from unoqa.dataset_io import QualityGrade
from unoqa.encoder import FeaturePyramid, PyramidConfig, extract_stat_pyramid
from unoqa.errors import ConfigError, DegenerateError
from unoqa.flow import LOG_2PI, FlowConfig, FlowDecoder, FlowModel, PositionalEncodingConfig
from unoqa.scoring import (LikelihoodGrid, ThresholdModel, anomaly_map, calibrate_threshold, f1_score,
                           image_score, likelihood_grids, otsu_threshold, read_scores_csv,
                           write_scores_csv)


def zero_model(ll_stats=((0.0, 1.0), (0.0, 1.0))):
    pc = PyramidConfig((4, 8), image_size=16, dims=(3, 3))
    fc = FlowConfig(pe=PositionalEncodingConfig(dim=4))
    decs = []
    for mean, std in ll_stats:
        d = FlowDecoder(3, fc)
        d.mean = np.array([0.2, -1.0, 3.0])
        d.std = np.array([1.0, 2.0, 0.5])
        d.ll_mean, d.ll_std = mean, std
        decs.append(d)
    return FlowModel(pc, fc, decs)


def test_zero_model_at_training_mean():
    model = zero_model()
    mean = model.decoders[0].mean
    pyr = FeaturePyramid([np.broadcast_to(mean, (4, 4, 3)), np.broadcast_to(mean, (2, 2, 3))])
    for g in likelihood_grids(pyr, model):
        np.testing.assert_allclose(g.values, -1.5 * LOG_2PI, rtol=0, atol=1e-12)


def test_grids_are_deterministic(tiny_model, tiny_corpus, tiny_cfg):
    pyr = extract_stat_pyramid(tiny_corpus[0][0], tiny_cfg.pyramid_config)
    a, b = likelihood_grids(pyr, tiny_model), likelihood_grids(pyr, tiny_model)
    assert all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a, b))


def test_grid_shape_mismatch():
    with pytest.raises(ConfigError):
        likelihood_grids(FeaturePyramid([np.zeros((4, 4, 3))]), zero_model())


def _grids(values0, values1):
    return [LikelihoodGrid(0, np.full((4, 4), values0, dtype=float)),
            LikelihoodGrid(1, np.full((2, 2), values1, dtype=float))]


@pytest.mark.parametrize("aggregation", ["max", "mean"])
def test_grids_at_training_mean_score_zero(aggregation):
    model = zero_model(((-3.0, 2.0), (5.0, 0.5)))
    assert image_score(_grids(-3.0, 5.0), model, aggregation) == 0.0


def test_one_scale_two_sigma_below():
    model = zero_model(((-3.0, 2.0), (5.0, 0.5)))
    assert image_score(_grids(-3.0, 5.0 - 2 * 0.5), model, "mean") == 2.0
    assert image_score(_grids(-3.0 - 2 * 2.0, 5.0), model, "mean") == 2.0


def test_anomaly_map_upsamples_to_finest_grid():
    model = zero_model()
    grids = [LikelihoodGrid(0, np.zeros((4, 4))), LikelihoodGrid(1, np.array([[-1.0, 0.0], [0.0, 0.0]]))]
    amap = anomaly_map(grids, model)
    assert amap.shape == (4, 4)
    assert amap[0, 0] == 1.0 and amap[3, 3] == 0.0
    assert image_score(grids, model, "max") == 1.0


def test_zero_spread_is_degenerate():
    with pytest.raises(DegenerateError):
        image_score(_grids(0.0, 0.0), zero_model(((0.0, 0.0), (0.0, 1.0))))


def test_unknown_aggregation():
    with pytest.raises(ConfigError):
        image_score(_grids(0.0, 0.0), zero_model(), "median")


# --- threshold calibration -----------------------------------------------------

def test_separable_scores_midpoint():
    th = calibrate_threshold([1, 2, 8, 9], [False, False, True, True])
    assert th.tau == 5.0 and th.f1 == 1.0 and th.mode == "f1max" and not th.fallback


def test_interleaved_scores():
    th = calibrate_threshold([1, 3, 2, 4], [False, True, False, True])
    assert th.tau == 2.5 and th.f1 == 1.0


def test_single_class_falls_back_to_otsu():
    th = calibrate_threshold([1, 2, 3], [True, True, True])
    assert th.fallback and th.mode == "otsu"


def test_otsu_bimodal_and_constant():
    th = otsu_threshold([0, 0, 0, 10, 10, 10])
    assert 0 < th.tau < 10
    assert th.predict([0, 10]).tolist() == [False, True]
    with pytest.raises(DegenerateError):
        otsu_threshold([4, 4, 4])


@given(st.lists(st.tuples(st.integers(0, 6).map(float), st.booleans()), min_size=1, max_size=12))
def test_calibration_reaches_exhaustive_best_f1(pairs):
    scores = np.array([s for s, _ in pairs])
    positive = np.array([p for _, p in pairs])
    if positive.all() or not positive.any():
        return
    th = calibrate_threshold(scores, positive)
    best = exhaustive_best_f1(scores, positive)
    assert th.f1 == best
    assert f1_score(scores, positive, th.tau) == best


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.floats(-5, 5))
def test_split_is_exhaustive_and_disjoint(scores, tau):
    non = ThresholdModel(tau, "f1max").predict(scores)
    outstanding = {i for i, s in enumerate(scores) if s <= tau}
    assert outstanding == {i for i, n in enumerate(non) if not n}


def test_threshold_text_round_trip():
    for th in (ThresholdModel(0.1 + 0.2, "f1max", 2 / 3), ThresholdModel(-4.5, "otsu", None, True)):
        assert ThresholdModel.from_text(th.to_text()) == th


def test_scores_csv_round_trip(tmp_path):
    th = ThresholdModel(1.0, "f1max", 1.0)
    scores = [0.5, 1.0, 1.0 + 1e-12, 7.25]
    write_scores_csv(tmp_path / "s.csv", ["a", "b", "c", "d"], scores, th)
    ids, back, flags = read_scores_csv(tmp_path / "s.csv")
    assert ids == ["a", "b", "c", "d"]
    assert back.tolist() == scores
    assert flags.tolist() == [False, False, True, True]


def test_scores_rise_with_corruption(benchmark):
    scores = benchmark.scored.scores
    means = {g: scores[[i for i, l in enumerate(benchmark.labels) if l is g]].mean() for g in QualityGrade}
    assert means[QualityGrade.UNGRADABLE] > means[QualityGrade.GRADABLE] > means[QualityGrade.OUTSTANDING]
