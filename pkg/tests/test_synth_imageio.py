import numpy as np
import pytest
from scipy.signal import correlate2d

from dcap.episodes import SPLITS, Dataset
from dcap.imageio import IngestionError, export_dataset, load_image_dir, read_pnm, write_pnm
from dcap.synth import REGIMES, Glyph, SynthError, SynthSpec, class_glyphs, render_glyph, synth_generate

SMALL = dict(classes_per_split=(3, 2, 2), images_per_class=6, image_size=32)


def test_same_spec_same_bytes():
    a = synth_generate(SynthSpec(**SMALL))
    b = synth_generate(SynthSpec(**SMALL))
    assert a.images.tobytes() == b.images.tobytes()
    assert a.class_names == b.class_names
    c = synth_generate(SynthSpec(**SMALL, seed=1))
    assert a.images.tobytes() != c.images.tobytes()


def test_splits_are_class_disjoint_and_audited():
    ds = synth_generate(SynthSpec(**SMALL))
    assert [len(ds.classes(s)) for s in SPLITS] == [3, 2, 2]
    ds.audit()


def test_distractor_regime_always_has_distractors():
    _, infos = synth_generate(SynthSpec(**SMALL, regime_weights=(0, 0, 1)), with_info=True)
    assert all(i.regime == REGIMES[2] and i.distractors >= 1 for i in infos)
    _, infos = synth_generate(SynthSpec(**SMALL, regime_weights=(0, 1, 0)), with_info=True)
    assert all(i.distractors == 0 for i in infos)


def test_salient_target_located_at_centre_by_template_match():
    spec = SynthSpec(classes_per_split=(4, 0, 0), images_per_class=5, image_size=64, noise=0.0,
                     regime_weights=(1, 0, 0))
    ds = synth_generate(spec)
    glyphs = class_glyphs(spec)
    size = spec.image_size
    for i in range(len(ds)):
        img = ds.images[i, ..., 0].astype(float) / 255
        template = render_glyph(glyphs[ds.labels[i]], 42)
        score = correlate2d(img - img.mean(), template - template.mean(), mode="valid")
        top, left = np.unravel_index(np.argmax(score), score.shape)
        centre = np.array([top, left]) + 21
        assert np.all(np.abs(centre - size / 2) <= 0.15 * size)


def test_zero_length_segment_renders_as_dot():
    dot = Glyph(np.array([[0.5, 0.5, 0.5, 0.5]]), np.zeros((0, 5)), 0.2)
    ink = render_glyph(dot, 16)
    assert np.all(np.isfinite(ink)) and ink[8, 8] == 1.0 and ink[0, 0] == 0.0


def test_blob_vocabulary_renders_finite_pixels():
    with np.errstate(all="raise"):
        ds = synth_generate(SynthSpec(**SMALL, vocabulary="blobs"))
    assert ds.images.max() > 0


def test_spec_validation():
    for bad in (dict(image_size=40), dict(image_size=16), dict(regime_weights=(0.5, 0.5, 0.5)),
                dict(vocabulary="letters"), dict(channels=2), dict(images_per_class=0)):
        with pytest.raises(SynthError):
            SynthSpec(**bad)


def test_rgb_generation():
    ds = synth_generate(SynthSpec(**SMALL, channels=3))
    assert ds.images.shape[1:] == (32, 32, 3)


def test_export_load_round_trip(tmp_path):
    ds = synth_generate(SynthSpec(**SMALL))
    back = load_image_dir(export_dataset(ds, tmp_path / "tree"))
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)
    assert back.class_names == ds.class_names and back.class_splits == ds.class_splits


def test_two_splits_three_classes_four_images(tmp_path):
    rng = np.random.default_rng(0)
    for split in ("meta-train", "meta-test"):
        for c in "abc":
            d = tmp_path / split / c
            d.mkdir(parents=True)
            for k in range(4):
                write_pnm(d / f"{k}.pgm", rng.integers(0, 256, (8, 8), dtype=np.uint8))
    ds = load_image_dir(tmp_path)
    assert len(ds) == 24
    assert ds.class_names == ("a", "b", "c", "a", "b", "c")
    assert ds.class_splits[:3] == ("meta-train",) * 3


def test_empty_class_names_the_class(tmp_path):
    (tmp_path / "meta-train" / "lonely").mkdir(parents=True)
    with pytest.raises(IngestionError, match="lonely"):
        load_image_dir(tmp_path)


def test_inconsistent_extent_and_bad_files(tmp_path):
    d = tmp_path / "meta-train" / "a"
    d.mkdir(parents=True)
    write_pnm(d / "0.pgm", np.zeros((8, 8), np.uint8))
    write_pnm(d / "1.pgm", np.zeros((4, 8), np.uint8))
    with pytest.raises(IngestionError, match="extent"):
        load_image_dir(tmp_path)
    (d / "1.pgm").write_bytes(b"P5\n8 8\n255\n" + b"\0" * 10)
    with pytest.raises(IngestionError, match="1.pgm"):
        load_image_dir(tmp_path)
    (tmp_path / "train").mkdir()
    with pytest.raises(IngestionError, match="unknown split"):
        load_image_dir(tmp_path)


def test_pnm_round_trip_with_comment(tmp_path):
    img = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    write_pnm(tmp_path / "x.ppm", img, comment="hello\nworld")
    assert np.array_equal(read_pnm(tmp_path / "x.ppm"), img)
    gray = np.arange(6, dtype=np.uint8).reshape(2, 3)
    write_pnm(tmp_path / "y.pgm", gray)
    assert (tmp_path / "y.pgm").read_bytes() == b"P5\n3 2\n255\n" + gray.tobytes()


def test_dataset_from_loader_is_valid_dataset(tmp_path):
    ds = synth_generate(SynthSpec(**SMALL))
    back = load_image_dir(export_dataset(ds, tmp_path))
    assert isinstance(back, Dataset) and back.num_base_classes == 3
