import os
import numpy as np
import pytest
from mock import patch
from scipy.stats import chisquare
from nlss.utils import derive_seed, ConfigError, DataError, Offsets
from nlss.data import (
    SceneSpec,
    NormStats,
    generate,
    generate_location,
    inject_noise,
    split_ids,
    normalize,
    save_dataset,
    load_dataset,
    augment,
    joint_transform,
    agreement_accuracy,
    filter_by_agreement,
)


TOL = 1e-6


@pytest.fixture(scope="module")
def spec():
    return SceneSpec(num_locations=6, num_test_locations=2, height=16, width=16, val_fraction=0.2, seed=3)


@pytest.fixture(scope="module")
def dataset(spec):
    return generate(spec)


def test_generation_is_deterministic(spec, dataset):
    other = generate(spec)
    for i, loc in dataset.locations.items():
        np.testing.assert_equal(loc.images1, other.locations[i].images1)
        np.testing.assert_equal(loc.labels, other.locations[i].labels)


def test_generation_independent_of_threads(spec, dataset):
    with patch.dict(os.environ, {"NLSS_THREADS": "1"}):
        serial = generate(spec)
    for i, loc in dataset.locations.items():
        np.testing.assert_equal(loc.images2, serial.locations[i].images2)
        np.testing.assert_equal(loc.clean, serial.locations[i].clean)


def test_bad_thread_count(spec):
    with patch.dict(os.environ, {"NLSS_THREADS": "many"}):
        with pytest.raises(ConfigError):
            generate(spec)


def test_location_shapes(spec, dataset):
    loc = dataset.locations[0]
    assert loc.images1.shape == (4, spec.channels1, 16, 16)
    assert loc.images2.shape == (4, spec.channels2, 16, 16)
    assert loc.labels.shape == (4, 16, 16)
    assert loc.clean.shape == (16, 16)
    assert loc.labels.max() < spec.num_classes


def test_seasons_differ(dataset):
    loc = dataset.locations[1]
    assert not np.array_equal(loc.labels[0], loc.labels[1])
    assert not np.allclose(loc.images1[0], loc.images1[1])


def test_splits_are_disjoint(spec, dataset):
    splits = dataset.splits
    assert len(splits["val"]) == 1
    assert not set(splits["train"]) & set(splits["val"])
    assert sorted(np.concatenate([splits["train"], splits["val"]])) == list(range(spec.num_locations))
    np.testing.assert_equal(splits["test"], [6, 7])
    np.testing.assert_equal(split_ids(spec)["val"], splits["val"])


def test_noisy_split_is_normalized(dataset):
    split = dataset.split("train")
    assert split.x1.min() >= 0.0 and split.x1.max() <= 1.0
    assert split.x1.shape[:2] == (len(split), 4)


def test_unknown_split(dataset):
    with pytest.raises(ConfigError):
        dataset.split("holdout")


def test_clean_split_flatten(dataset):
    test = dataset.clean_split("test")
    x, y = test.flatten(2)
    assert x.shape[0] == y.shape[0] == 4 * len(test)
    np.testing.assert_equal(y[:4], np.repeat(test.labels[:1], 4, axis=0))


def test_zero_noise_reproduces_clean():
    clean_spec = SceneSpec(num_locations=2, num_test_locations=0, height=16, width=16, noise_rate=0.0, seed=1)
    loc = generate_location(clean_spec, 0)
    for s in range(4):
        np.testing.assert_equal(loc.labels[s], loc.clean)


def test_noise_fraction_near_rate(dataset, spec):
    fraction = dataset.noise_fraction("train")
    assert 0.1 < fraction < spec.noise_rate + 0.1


def test_symmetric_transition_matrix():
    clean = derive_seed(0).integers(0, 4, size=(200, 200)).astype(np.uint8)
    noisy = inject_noise(clean, "symmetric", 0.3, 0, 4)
    assert abs(np.mean(noisy != clean) - 0.3) < 0.02
    for c in range(4):
        row = np.bincount(noisy[clean == c], minlength=4) / np.sum(clean == c)
        np.testing.assert_allclose(row[c], 0.7, atol=0.03)
        np.testing.assert_allclose(np.delete(row, c), 0.1, atol=0.03)


def test_symmetric_keeps_unlabeled():
    clean = np.full((8, 8), Offsets.UNLABELED, dtype=np.uint8)
    np.testing.assert_equal(inject_noise(clean, "symmetric", 0.5, 0, 4), clean)


def test_boundary_noise_stays_on_boundaries():
    clean = np.zeros((20, 20), dtype=np.uint8)
    clean[:, 10:] = 1
    noisy = inject_noise(clean, "boundary", 0.1, 0, 2)
    changed = np.argwhere(noisy != clean)
    assert len(changed) > 0
    assert len(changed) <= round(0.1 * clean.size)
    assert np.all(np.abs(changed[:, 1] - 9.5) <= 2.5)


def test_noise_errors():
    with pytest.raises(ConfigError):
        inject_noise(np.zeros((4, 4), dtype=np.uint8), "salt", 0.1, 0, 2)
    with pytest.raises(ConfigError):
        inject_noise(np.zeros((4, 4), dtype=np.uint8), "symmetric", 1.0, 0, 2)


def test_unlabeled_rate():
    spec = SceneSpec(num_locations=1, num_test_locations=0, height=32, width=32, unlabeled_rate=0.2)
    loc = generate_location(spec, 0)
    share = np.mean(loc.labels == Offsets.UNLABELED)
    assert 0.1 < share < 0.3
    assert np.all(loc.clean != Offsets.UNLABELED)


def test_label_map():
    spec = SceneSpec(num_locations=1, num_test_locations=0, height=16, width=16, label_map=[0, 1, 2, 2])
    assert spec.output_classes == 3
    loc = generate_location(spec, 0)
    assert loc.clean.max() <= 2
    assert loc.labels.max() <= 2


@pytest.mark.parametrize(
    "fields",
    [
        {"num_classes": 1},
        {"seasons": 3},
        {"noise_rate": 1.0},
        {"noise_kind": "salt"},
        {"label_map": [0, 1]},
        {"num_locations": 0},
    ],
)
def test_scene_spec_validation(fields):
    with pytest.raises(ConfigError):
        SceneSpec(**fields)


def test_scene_spec_unknown_key():
    with pytest.raises(ConfigError):
        SceneSpec.from_dict(num_locations=4, cloud_cover=0.2)


def test_normalize_affine():
    stats = NormStats([1.0], [2.0])
    x = np.array([1.0 + 2.0, 1.0, -10.0, 50.0]).reshape(1, 1, 4)
    np.testing.assert_allclose(normalize(x, stats).reshape(-1), [0.75, 0.5, 0.0, 1.0], TOL)


def test_norm_stats_need_positive_std():
    with pytest.raises(ConfigError):
        NormStats([0.0], [0.0])


def test_dataset_save_load(tmpdir, dataset):
    path = str(tmpdir)
    save_dataset(dataset, path)
    loaded = load_dataset(path)
    assert loaded.spec == dataset.spec
    for k in dataset.splits:
        np.testing.assert_equal(loaded.splits[k], dataset.splits[k])
    np.testing.assert_allclose(loaded.norm[1].mean, dataset.norm[1].mean, TOL)
    np.testing.assert_equal(loaded.split("train").labels, dataset.split("train").labels)
    np.testing.assert_allclose(loaded.clean_split("test").x2, dataset.clean_split("test").x2, TOL)
    with pytest.raises(ConfigError):
        save_dataset(dataset, path)
    save_dataset(dataset, path, force=True)


def test_load_missing_dataset(tmpdir):
    with pytest.raises(DataError):
        load_dataset(str(tmpdir))


def test_joint_transform_is_shared():
    a = np.arange(16.0).reshape(4, 4)
    b = a.astype(np.uint8)
    ta, tb = joint_transform([a[None], b], crop=(1, 1, 2), flip_axis=-1, k_rot=1)
    np.testing.assert_equal(ta[0], tb)
    np.testing.assert_equal(tb, np.rot90(np.flip(b[1:3, 1:3], axis=-1)))


def test_augment_keeps_alignment(dataset):
    split = dataset.split("train")
    sample = (split.x1[0], split.x2[0], split.labels[0])
    out = augment(sample, np.random.default_rng(0), crop_size=8, flip_prob=1.0, rotate_prob=1.0)
    assert out.x1.shape == (split.x1.shape[2], 8, 8)
    assert out.labels.shape == (4, 8, 8)
    assert 0 <= out.season < 4


def test_augment_identity_without_randomness(dataset):
    split = dataset.split("train")
    sample = (split.x1[0], split.x2[0], split.labels[0])
    out = augment(sample, np.random.default_rng(0), crop_size=None, flip_prob=0.0, rotate_prob=0.0)
    np.testing.assert_equal(out.x2, split.x2[0][out.season])
    np.testing.assert_equal(out.labels, split.labels[0])


def test_augment_non_square_tile_keeps_shape():
    rng = np.random.default_rng(0)
    x1 = rng.normal(size=(4, 2, 6, 10))
    x2 = rng.normal(size=(4, 3, 6, 10))
    labels = rng.integers(0, 3, size=(4, 6, 10)).astype(np.uint8)
    for seed in range(20):
        out = augment((x1, x2, labels), np.random.default_rng(seed), crop_size=None, flip_prob=0.0, rotate_prob=1.0)
        assert out.x1.shape == (2, 6, 10)
        assert out.x2.shape == (3, 6, 10)
        np.testing.assert_equal(out.labels, np.rot90(labels, 2, axes=(-2, -1)))


def test_augment_season_is_uniform():
    sample = (np.zeros((4, 1, 2, 2)), np.zeros((4, 1, 2, 2)), np.zeros((4, 2, 2), dtype=np.uint8))
    rng = np.random.default_rng(21)
    seasons = [augment(sample, rng).season for _ in range(10 ** 4)]
    counts = np.bincount(seasons, minlength=4)
    assert counts.size == 4
    assert chisquare(counts).pvalue > 0.01


def test_augment_crop_too_large(dataset):
    split = dataset.split("train")
    with pytest.raises(ConfigError):
        augment((split.x1[0], split.x2[0], split.labels[0]), np.random.default_rng(0), crop_size=32)


A, B, C = 10, 11, 12
RELATION = {1: {A}, 2: {A, B}}


def test_agreement_accuracy():
    np.testing.assert_allclose(agreement_accuracy([1, 2, 2, 1], [A, B, A, C], RELATION), 0.75, TOL)


def test_agreement_skips_unlabeled():
    U = Offsets.UNLABELED
    np.testing.assert_allclose(agreement_accuracy([1, 2, U, 1], [A, B, A, U], RELATION), 1.0, TOL)
    assert np.isnan(agreement_accuracy([U], [A], RELATION))


def test_agreement_errors():
    with pytest.raises(DataError):
        agreement_accuracy([1, 2], [A], RELATION)
    with pytest.raises(DataError):
        agreement_accuracy([3], [A], RELATION)


def test_filter_by_agreement():
    pairs = [(0, [1, 2, 2, 1], [A, B, A, A]), (1, [1, 2, 2, 1], [A, B, A, C]), (2, [1, 1], [C, C])]
    assert filter_by_agreement(pairs, RELATION) == [0]
