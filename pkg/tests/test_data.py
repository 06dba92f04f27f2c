"""Corpus loading, splits, preprocessing, augmentation, synthetic data."""

import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from plutonet.data import (
    AugmentationConfig,
    Sample,
    SplitSpec,
    augment,
    flip_pair,
    generate_synthetic,
    load_corpus,
    preprocess,
    preprocess_pair,
    rotate_pair,
    sample_rng,
    split_corpus,
)
from plutonet.errors import ConfigError, DataError


def _write_pair(root, stem, size=(32, 48), mask_value=255):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(abs(hash(stem)) % 2**32)
    img = (rng.random((size[0], size[1], 3)) * 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(root / "images" / f"{stem}.png")
    mask = np.zeros(size, dtype=np.uint8)
    mask[4:12, 6:20] = mask_value
    Image.fromarray(mask, "L").save(root / "masks" / f"{stem}.png")


class TestLoadCorpus:
    def test_matched_pairs_in_lexicographic_order(self, tmp_path):
        for stem in ("c", "a", "b"):
            _write_pair(tmp_path, stem)
        samples = load_corpus(tmp_path)
        assert [s.id for s in samples] == ["a", "b", "c"]

    def test_empty_corpus_warns_and_returns_empty(self, tmp_path, caplog):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        with caplog.at_level("WARNING"):
            assert load_corpus(tmp_path) == []
        assert "empty" in caplog.text

    def test_orphan_fatal_in_strict_mode(self, tmp_path):
        _write_pair(tmp_path, "a")
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "images" / "orphan.png")
        with pytest.raises(DataError, match="orphan"):
            load_corpus(tmp_path, strict=True)

    def test_orphan_skipped_when_lenient(self, tmp_path):
        _write_pair(tmp_path, "a")
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "images" / "orphan.png")
        samples = load_corpus(tmp_path, strict=False)
        assert [s.id for s in samples] == ["a"]

    def test_missing_layout_is_data_error(self, tmp_path):
        with pytest.raises(DataError):
            load_corpus(tmp_path / "nothing")


class TestSplitCorpus:
    def _samples(self, n):
        return [Sample(f"s{i:03d}", None, None) for i in range(n)]

    def test_100_splits_80_10_10(self):
        train, val, test = split_corpus(self._samples(100), SplitSpec(seed=3))
        assert (len(train), len(val), len(test)) == (80, 10, 10)

    def test_103_splits_83_10_10(self):
        train, val, test = split_corpus(self._samples(103), SplitSpec(seed=3))
        assert (len(train), len(val), len(test)) == (83, 10, 10)

    def test_same_seed_same_membership(self):
        samples = self._samples(37)
        a = split_corpus(samples, SplitSpec(seed=5))
        b = split_corpus(samples, SplitSpec(seed=5))
        for lhs, rhs in zip(a, b):
            assert [s.id for s in lhs] == [s.id for s in rhs]

    def test_too_few_samples_rejected(self):
        with pytest.raises(DataError):
            split_corpus(self._samples(9), SplitSpec())

    def test_bad_fractions_rejected(self):
        with pytest.raises(ConfigError):
            SplitSpec(train_frac=0.9, val_frac=0.2, test_frac=0.1)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(10, 300), seed=st.integers(0, 2**31 - 1))
    def test_disjoint_and_covering(self, n, seed):
        samples = self._samples(n)
        train, val, test = split_corpus(samples, SplitSpec(seed=seed))
        ids = [s.id for part in (train, val, test) for s in part]
        assert len(ids) == n
        assert set(ids) == {s.id for s in samples}
        assert len(val) == int(np.floor(0.1 * n))
        assert len(test) == int(np.floor(0.1 * n))


class TestPreprocess:
    def test_resizes_to_224(self, tmp_path):
        _write_pair(tmp_path, "a", size=(288, 384))
        image, mask = preprocess(load_corpus(tmp_path)[0])
        assert image.shape == (3, 224, 224) and mask.shape == (1, 224, 224)
        assert image.dtype == np.float32
        assert 0.0 <= image.min() and image.max() <= 1.0
        assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_all_background_mask_is_zero(self, tmp_path):
        _write_pair(tmp_path, "a", mask_value=0)
        _, mask = preprocess(load_corpus(tmp_path)[0])
        assert np.all(mask == 0.0)

    def test_antialiased_grays_become_binary(self):
        mask = np.full((64, 64), 0.4, dtype=np.float32)
        mask[10:30, 10:30] = 0.8
        _, out = preprocess_pair(np.zeros((3, 64, 64), np.float32), mask)
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_idempotent_on_preprocessed_input(self, tmp_path):
        _write_pair(tmp_path, "a", size=(224, 224))
        image, mask = preprocess(load_corpus(tmp_path)[0])
        image2, mask2 = preprocess_pair(image, mask[0])
        np.testing.assert_array_equal(image, image2)
        np.testing.assert_array_equal(mask, mask2)

    def test_standardize_flag_applies_channel_stats(self, tmp_path):
        from plutonet.data import CHANNEL_MEAN, CHANNEL_STD

        _write_pair(tmp_path, "a")
        sample = load_corpus(tmp_path)[0]
        plain, _ = preprocess(sample)
        standardized, _ = preprocess(sample, standardize=True)
        np.testing.assert_allclose(
            standardized,
            (plain - CHANNEL_MEAN[:, None, None]) / CHANNEL_STD[:, None, None],
            rtol=1e-6,
        )

    def test_undecodable_file_names_path(self, tmp_path):
        (tmp_path / "images").mkdir(parents=True)
        (tmp_path / "masks").mkdir(parents=True)
        (tmp_path / "images" / "bad.png").write_bytes(b"not a png")
        (tmp_path / "masks" / "bad.png").write_bytes(b"also not")
        sample = Sample("bad", tmp_path / "images" / "bad.png", tmp_path / "masks" / "bad.png")
        with pytest.raises(DataError, match="bad.png"):
            preprocess(sample)


class TestAugment:
    def test_double_flip_is_identity(self, rng):
        image = rng.random((3, 32, 32)).astype(np.float32)
        mask = (rng.random((1, 32, 32)) > 0.5).astype(np.float32)
        f_img, f_mask = flip_pair(*flip_pair(image, mask))
        np.testing.assert_array_equal(f_img, image)
        np.testing.assert_array_equal(f_mask, mask)

    def test_zero_rotation_is_identity(self, rng):
        image = rng.random((3, 16, 16)).astype(np.float32)
        mask = (rng.random((1, 16, 16)) > 0.5).astype(np.float32)
        r_img, r_mask = rotate_pair(image, mask, 0.0)
        np.testing.assert_array_equal(r_img, image)
        np.testing.assert_array_equal(r_mask, mask)

    def test_fixed_stream_reproduces(self, rng):
        image = rng.random((3, 32, 32)).astype(np.float32)
        mask = (rng.random((1, 32, 32)) > 0.5).astype(np.float32)
        cfg = AugmentationConfig()
        out1 = augment((image, mask), cfg, sample_rng(1, 2, "img_a"))
        out2 = augment((image, mask), cfg, sample_rng(1, 2, "img_a"))
        np.testing.assert_array_equal(out1[0], out2[0])
        np.testing.assert_array_equal(out1[1], out2[1])

    def test_mask_stays_binary_under_rotation(self, rng):
        image = rng.random((3, 48, 48)).astype(np.float32)
        mask = np.zeros((1, 48, 48), dtype=np.float32)
        mask[0, 12:30, 14:34] = 1.0
        for angle in (7.3, -21.0, 29.9):
            _, rotated = rotate_pair(image, mask, angle)
            assert set(np.unique(rotated)) <= {0.0, 1.0}

    def test_geometry_never_desynchronizes(self, rng):
        # encode the mask in one color channel; after any augmentation the
        # channel must still binarize to exactly the augmented mask
        mask = np.zeros((1, 64, 64), dtype=np.float32)
        mask[0, 20:40, 24:44] = 1.0  # margin keeps border handling inert
        image = rng.random((3, 64, 64)).astype(np.float32)
        image[2] = mask[0]
        cfg = AugmentationConfig(rotation_max_degrees=25.0)
        for draw in range(25):
            a_img, a_mask = augment((image, mask), cfg, sample_rng(9, draw, "enc"))
            np.testing.assert_array_equal((a_img[2] >= 0.5).astype(np.float32), a_mask[0])


class TestSyntheticGenerator:
    def test_deterministic_and_byte_identical(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_synthetic(6, seed=7, out_dir=a)
        generate_synthetic(6, seed=7, out_dir=b)
        for rel in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
            assert filecmp.cmp(a / rel, b / rel, shallow=False), rel

    def test_manifest_records_seed_and_version(self, small_corpus):
        manifest = json.loads((small_corpus / "manifest.json").read_text())
        assert manifest["seed"] == 7
        assert manifest["n"] == 12
        assert manifest["version"] >= 1

    def test_foreground_fraction_in_range(self, small_corpus):
        samples = load_corpus(small_corpus)
        for sample in samples:
            _, mask = preprocess(sample)
            frac = float(mask.mean())
            assert 0.01 <= frac <= 0.5, sample.id

    def test_roundtrips_through_loader(self, small_corpus):
        samples = load_corpus(small_corpus)
        assert len(samples) == 12
        image, mask = preprocess(samples[0])
        assert image.shape == (3, 224, 224)
        assert set(np.unique(mask)) == {0.0, 1.0}

    def test_rejects_nonpositive_n(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_synthetic(0, seed=1, out_dir=tmp_path / "x")
