"""Dataset generation, transforms, jigsaw construction, batching, file I/O."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpcd.data import (Dataset, DatasetSpec, JitterFactors, LabelAccessError, apply_jitter,
                       batch_iterator, draw_jitter_factors, forbid_label_reads,
                       generate_synthetic_dataset, geometric_flip, handcrafted_features,
                       make_jigsaw, photometric_jitter, read_dataset, retile, write_dataset)


@pytest.fixture(scope="module")
def small_dataset():
    return generate_synthetic_dataset(DatasetSpec(n_classes=4, samples_per_class=8,
                                                  image_size=16, seed=7))


def test_sample_count_and_ids(small_dataset):
    assert len(small_dataset) == 32
    assert [s.id for s in small_dataset.samples] == list(range(32))


def test_regeneration_is_byte_identical():
    spec = DatasetSpec(n_classes=4, samples_per_class=4, image_size=16, seed=7)
    a = generate_synthetic_dataset(spec)
    b = generate_synthetic_dataset(spec)
    assert a.pixel_hash() == b.pixel_hash()


def test_different_seeds_differ():
    a = generate_synthetic_dataset(DatasetSpec(samples_per_class=4, seed=1))
    b = generate_synthetic_dataset(DatasetSpec(samples_per_class=4, seed=2))
    assert a.pixel_hash() != b.pixel_hash()


def test_two_class_labels_balanced():
    ds = generate_synthetic_dataset(DatasetSpec(n_classes=2, samples_per_class=5, seed=0))
    labels = [s.latent_class for s in ds.samples]
    assert sorted(set(labels)) == [0, 1]
    assert labels.count(0) == labels.count(1) == 5


def test_pixels_in_unit_range(small_dataset):
    for s in small_dataset.samples:
        assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        DatasetSpec(n_classes=1)
    with pytest.raises(ValueError):
        DatasetSpec(frequencies=(1.0, 2.0), n_classes=4)


def test_classes_separable_in_handcrafted_space(small_dataset):
    spec = small_dataset.spec
    feats = np.stack([handcrafted_features(s.pixels, spec) for s in small_dataset.samples])
    labels = np.array([s.latent_class for s in small_dataset.samples])
    means = np.stack([feats[labels == c].mean(axis=0) for c in range(spec.n_classes)])
    predictions = ((feats[:, None, :] - means[None]) ** 2).sum(axis=2).argmin(axis=1)
    assert (predictions == labels).mean() == 1.0


def test_label_guard_trips(small_dataset):
    sample = small_dataset.samples[0]
    assert isinstance(sample.latent_class, int)
    with forbid_label_reads():
        with pytest.raises(LabelAccessError):
            _ = sample.latent_class
    assert isinstance(sample.latent_class, int)


# --- transformations -------------------------------------------------------


def test_jitter_strength_zero_is_identity(small_dataset):
    img = small_dataset.samples[0].pixels
    out = photometric_jitter(img, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 1.0))
def test_jitter_output_stays_in_range(seed, strength):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 1, (8, 8, 3))
    out = photometric_jitter(img, strength, rng)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_jitter_factors_replay():
    f1 = draw_jitter_factors(0.4, np.random.default_rng(42))
    f2 = draw_jitter_factors(0.4, np.random.default_rng(42))
    assert f1 == f2
    img = np.random.default_rng(3).uniform(0, 1, (6, 6, 3))
    np.testing.assert_array_equal(apply_jitter(img, f1), apply_jitter(img, f2))


def test_identity_jitter_factors():
    identity = JitterFactors(brightness=1.0, contrast=1.0, saturation=1.0, hue_shift=0.0)
    img = np.random.default_rng(4).uniform(0.05, 0.95, (5, 5, 3))
    np.testing.assert_allclose(apply_jitter(img, identity), img, atol=1e-12)


def test_hflip_moves_pixels():
    img = np.arange(12.0).reshape(2, 2, 3)
    out = geometric_flip(img, horizontal=True, vertical=False)
    np.testing.assert_array_equal(out[0, 0], img[0, 1])
    np.testing.assert_array_equal(out[1, 1], img[1, 0])


def test_double_flip_is_identity():
    img = np.random.default_rng(5).uniform(0, 1, (6, 6, 3))
    once = geometric_flip(img, True, True)
    twice = geometric_flip(once, True, True)
    np.testing.assert_array_equal(twice, img)


def test_vflip_hand_example():
    img = np.array([[[1.0], [2.0]], [[3.0], [4.0]]])
    out = geometric_flip(img, horizontal=False, vertical=True)
    np.testing.assert_array_equal(out[:, :, 0], [[3.0, 4.0], [1.0, 2.0]])


# --- jigsaw ----------------------------------------------------------------


def test_jigsaw_patch_count_and_shape():
    img = np.random.default_rng(6).uniform(0, 1, (128, 128, 3))
    ps = make_jigsaw(img, grid=2, patch_size=64, rng=np.random.default_rng(0))
    assert ps.patch_count == 4
    assert ps.patches.shape == (4, 64, 64, 3)


def test_jigsaw_retile_reconstructs_crop():
    rng = np.random.default_rng(7)
    img = rng.uniform(0, 1, (20, 20, 3))
    ps = make_jigsaw(img, grid=2, patch_size=8, rng=rng)
    oy, ox = ps.crop_offset
    crop = img[oy:oy + 16, ox:ox + 16, :]
    np.testing.assert_array_equal(retile(ps, grid=2), crop)


def test_jigsaw_permutations_are_bijections():
    img = np.random.default_rng(8).uniform(0, 1, (16, 16, 3))
    for seed in range(100):
        ps = make_jigsaw(img, grid=2, patch_size=8, rng=np.random.default_rng(seed))
        assert sorted(ps.permutation.tolist()) == [0, 1, 2, 3]


def test_jigsaw_oversize_rejected():
    img = np.zeros((16, 16, 3))
    with pytest.raises(ValueError, match="16x16"):
        make_jigsaw(img, grid=2, patch_size=9, rng=np.random.default_rng(0))


# --- batching --------------------------------------------------------------


def test_batch_iterator_counts(small_dataset):
    batches = list(batch_iterator(small_dataset, 10, seed=0, epoch=0))
    assert len(batches) == 3            # 32 // 10, last partial dropped
    ids = [s.id for b in batches for s, _ in b]
    assert len(ids) == len(set(ids)) == 30


def test_batch_iterator_epochs_reshuffle(small_dataset):
    order0 = [s.id for b in batch_iterator(small_dataset, 8, seed=0, epoch=0) for s, _ in b]
    order1 = [s.id for b in batch_iterator(small_dataset, 8, seed=0, epoch=1) for s, _ in b]
    order0_again = [s.id for b in batch_iterator(small_dataset, 8, seed=0, epoch=0) for s, _ in b]
    assert order0 != order1
    assert order0 == order0_again


def test_batch_iterator_matches_shuffled_prefix(small_dataset):
    seen = [s.id for b in batch_iterator(small_dataset, 10, seed=3, epoch=2) for s, _ in b]
    rng = np.random.default_rng(np.random.SeedSequence([3, 2, 0x5F1E]))
    expected = rng.permutation(32)[:30].tolist()
    assert seen == expected


def test_batch_iterator_rejects_empty_and_oversize(small_dataset):
    with pytest.raises(ValueError):
        list(batch_iterator(Dataset([], None), 4, seed=0, epoch=0))
    with pytest.raises(ValueError):
        list(batch_iterator(small_dataset, 33, seed=0, epoch=0))


# --- file format -----------------------------------------------------------


def test_dataset_round_trip(tmp_path, small_dataset):
    write_dataset(tmp_path / "ds", small_dataset)
    loaded = read_dataset(tmp_path / "ds")
    assert len(loaded) == len(small_dataset)
    assert loaded.pixel_hash() == small_dataset.pixel_hash()
    assert [s.latent_class for s in loaded.samples] == \
        [s.latent_class for s in small_dataset.samples]
    assert loaded.spec is not None and loaded.spec.seed == small_dataset.spec.seed


def test_dataset_file_header_layout(tmp_path, small_dataset):
    write_dataset(tmp_path / "ds", small_dataset)
    raw = (tmp_path / "ds" / "sample_000000.bin").read_bytes()
    assert raw[:8] == b"CPCDIMG1"
    h, w, c, sid, label = np.frombuffer(raw[8:28], dtype="<u4")
    assert (h, w, c, sid, label) == (16, 16, 3, 0, 0)
    assert len(raw) == 28 + 16 * 16 * 3 * 4


def test_manifest_lists_ids_and_labels(tmp_path, small_dataset):
    write_dataset(tmp_path / "ds", small_dataset)
    lines = (tmp_path / "ds" / "manifest.txt").read_text().splitlines()
    assert lines[0] == "0 0"
    assert len(lines) == 32
