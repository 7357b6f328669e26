import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from oracles import bilinear_pixelwise, laplacian_energy
from unoqa.dataset_io import (FEATURE_MAGIC, DegradationRange, GrayImage, Manifest, ManifestEntry,
                              QualityGrade, SynthCorpusSpec, generate_synthetic_corpus, load_image,
                              read_features, read_manifest, resize_bilinear, save_image,
                              write_features, write_manifest)
from unoqa.encoder import FeaturePyramid
from unoqa.errors import ConfigError, FormatError


def _png(path, data):
    Image.fromarray(np.asarray(data, dtype=np.uint8)).save(path)
    return path


# --- images ------------------------------------------------------------------

def test_two_by_two_identity_load(tmp_path):
    p = _png(tmp_path / "a.png", [[0, 255], [255, 0]])
    assert load_image(p, 2).pixels.tolist() == [[0.0, 1.0], [1.0, 0.0]]


@pytest.mark.parametrize("shape", [(7, 5), (320, 320), (500, 333)])
def test_constant_image_stays_constant(tmp_path, shape):
    p = _png(tmp_path / "c.png", np.full(shape, 128))
    img = load_image(p, 320)
    assert img.pixels.shape == (320, 320)
    np.testing.assert_allclose(img.pixels, 128 / 255, atol=1e-6)


def test_checkerboard_downsample_matches_footprint_average():
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    board[0, 0] = 0.3  # break the symmetry so a wrong footprint shows up
    out = resize_bilinear(board, 2, 2)
    footprint = board.reshape(2, 2, 2, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(out, footprint, atol=1e-12)
    np.testing.assert_allclose(out, bilinear_pixelwise(board, 2, 2), atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(0, 1)),
       st.integers(1, 12), st.integers(1, 12))
def test_resize_matches_pixelwise_oracle(arr, out_h, out_w):
    np.testing.assert_allclose(resize_bilinear(arr, out_h, out_w), bilinear_pixelwise(arr, out_h, out_w),
                               atol=1e-12)


def test_rgb_uses_luma_weights(tmp_path):
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 200, 100, 50
    p = _png(tmp_path / "rgb.png", rgb)
    expected = (0.299 * 200 + 0.587 * 100 + 0.114 * 50) / 255
    np.testing.assert_allclose(load_image(p, 2).pixels, expected, atol=1e-12)


def test_loading_target_size_image_is_idempotent(tmp_path, rng):
    img = GrayImage(np.round(rng.random((32, 32)) * 255) / 255)
    save_image(tmp_path / "x.png", img)
    once = load_image(tmp_path / "x.png", 32)
    save_image(tmp_path / "y.png", once)
    twice = load_image(tmp_path / "y.png", 32)
    assert np.abs(once.pixels - img.pixels).max() < 1e-6
    assert np.abs(twice.pixels - once.pixels).max() < 1e-6


def test_image_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "missing.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(OSError):
        load_image(tmp_path / "junk.png")
    Image.fromarray(np.full((4, 4), 1000, dtype=np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(FormatError):
        load_image(tmp_path / "deep.png")
    with pytest.raises(FormatError):
        GrayImage(np.zeros((0, 3)))
    with pytest.raises(FormatError):
        GrayImage(np.full((2, 2), 1.5))


# --- grades and manifests -----------------------------------------------------

def test_quality_grade_order_and_parse():
    assert list(QualityGrade) == [QualityGrade.OUTSTANDING, QualityGrade.GRADABLE, QualityGrade.UNGRADABLE]
    assert QualityGrade.OUTSTANDING < QualityGrade.GRADABLE < QualityGrade.UNGRADABLE
    assert QualityGrade.parse(" Gradable ") is QualityGrade.GRADABLE
    assert QualityGrade.parse("") is None
    with pytest.raises(FormatError):
        QualityGrade.parse("excellent")


def test_manifest_round_trip_and_relative_paths(tmp_path):
    m = Manifest([ManifestEntry("a", "img/a.png", QualityGrade.OUTSTANDING),
                  ManifestEntry("b", "/abs/b.png", None)])
    write_manifest(tmp_path / "m.csv", m)
    back = read_manifest(tmp_path / "m.csv")
    assert back.ids == ["a", "b"]
    assert back.labels() == {"a": QualityGrade.OUTSTANDING, "b": None}
    assert back.entries[0].path == str(tmp_path / "img/a.png")
    assert back.entries[1].path == "/abs/b.png"


def test_manifest_rejects_duplicates_and_bad_header(tmp_path):
    with pytest.raises(FormatError):
        Manifest([ManifestEntry("a", "x"), ManifestEntry("a", "y")])
    (tmp_path / "bad.csv").write_text("name,file\nx,y\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "bad.csv")


def test_manifest_filter_and_subset():
    m = Manifest([ManifestEntry(str(i), "", g) for i, g in enumerate(QualityGrade)])
    assert m.filter([QualityGrade.GRADABLE]).ids == ["1"]
    assert m.subset(["2", "0"]).ids == ["0", "2"]


# --- synthetic corpus --------------------------------------------------------

def test_synthetic_corpus_is_deterministic():
    spec = SynthCorpusSpec(count_per_grade=1, seed=7, size=64)
    a_imgs, a_man = generate_synthetic_corpus(spec)
    b_imgs, b_man = generate_synthetic_corpus(spec)
    assert a_man == b_man
    for a, b in zip(a_imgs, b_imgs):
        assert a.pixels.tobytes() == b.pixels.tobytes()


def test_synthetic_corpus_counts():
    _, man = generate_synthetic_corpus(SynthCorpusSpec(count_per_grade=3, seed=2, size=32))
    assert len(set(man.ids)) == 9
    for g in QualityGrade:
        assert len(man.filter([g])) == 3


def test_synthetic_sharpness_ordered_by_grade():
    images, man = generate_synthetic_corpus(SynthCorpusSpec(count_per_grade=10, seed=1))
    energy = {g: np.mean([laplacian_energy(im.pixels) for im, e in zip(images, man) if e.label is g])
              for g in QualityGrade}
    assert energy[QualityGrade.UNGRADABLE] < energy[QualityGrade.GRADABLE] < energy[QualityGrade.OUTSTANDING]


def test_streams_give_disjoint_images():
    spec = SynthCorpusSpec(count_per_grade=2, seed=0, size=32, grades=(QualityGrade.OUTSTANDING,))
    a, _ = generate_synthetic_corpus(spec, stream=0)
    b, _ = generate_synthetic_corpus(spec, stream=1)
    assert not np.array_equal(a[0].pixels, b[0].pixels)


@pytest.mark.parametrize("change", [
    dict(count_per_grade=0),
    dict(gradable=DegradationRange(blur_sigma=(0.0, 4.0))),
    dict(gradable=DegradationRange(blur_sigma=(0.1, 0.2), occlusion_bands=(0, 5))),
    dict(ungradable=DegradationRange(blur_sigma=(2.0, 1.0), occlusion_bands=(1, 2))),
])
def test_invalid_corpus_specs(change):
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(SynthCorpusSpec(size=32, **change))


# --- feature file ------------------------------------------------------------

def test_feature_round_trip_bit_exact(tmp_path, rng):
    pyrs = [FeaturePyramid([rng.normal(size=(4, 4, 8)).astype(np.float32),
                            rng.normal(size=(2, 2, 8)).astype(np.float32)]) for _ in range(2)]
    write_features(tmp_path / "f.uft", pyrs, ["x", "y"])
    back, ids = read_features(tmp_path / "f.uft")
    assert ids == ["x", "y"]
    for a, b in zip(pyrs, back):
        for sa, sb in zip(a.scales, b.scales):
            assert sa.tobytes() == sb.tobytes()


finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5)), min_size=1, max_size=3),
       st.integers(1, 3), st.data())
def test_feature_round_trip_property(tmp_path_factory, shapes, n, data):
    pyrs = [FeaturePyramid([data.draw(arrays(np.float32, s, elements=finite32)) for s in shapes])
            for _ in range(n)]
    ids = [f"id{i}-é" for i in range(n)]
    path = tmp_path_factory.mktemp("prop") / "f.uft"
    write_features(path, pyrs, ids)
    back, back_ids = read_features(path)
    assert back_ids == ids
    for a, b in zip(pyrs, back):
        assert [s.tobytes() for s in a.scales] == [s.tobytes() for s in b.scales]


def _small_file(tmp_path):
    write_features(tmp_path / "f.uft", [FeaturePyramid([np.zeros((2, 2, 3), np.float32)])], ["a"])
    return (tmp_path / "f.uft").read_bytes()


def test_feature_bad_magic_names_expected(tmp_path):
    raw = _small_file(tmp_path)
    (tmp_path / "g.uft").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError, match="UNOQAFT1") as info:
        read_features(tmp_path / "g.uft")
    assert info.value.offset == 0


def test_feature_version_and_truncation(tmp_path):
    raw = _small_file(tmp_path)
    (tmp_path / "v.uft").write_bytes(FEATURE_MAGIC + struct.pack("<I", 9) + raw[12:])
    with pytest.raises(FormatError, match="version") as info:
        read_features(tmp_path / "v.uft")
    assert info.value.offset == 8
    (tmp_path / "t.uft").write_bytes(raw[:40])
    with pytest.raises(FormatError, match="truncated") as info:
        read_features(tmp_path / "t.uft")
    assert info.value.offset is not None and info.value.offset <= 40
