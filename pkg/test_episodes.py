"""
Tests for datasets, synthetic domains and episode sampling
"""

import hashlib

import numpy as np
import pytest

from conftest import SWAP, tiny_domain_specs
from src.utils.episodes import (
    MAX_SHOTS,
    QUERY_PER_CLASS,
    Dataset,
    EpisodeError,
    SyntheticDomainSpec,
    check_unseen_disjoint,
    default_domain_suite,
    episode_rng,
    fit_to_backbone,
    gen_synthetic_domains,
    make_channel_shift_episode,
    mix_channels,
    random_mixing_matrix,
    sample_episode,
)


def small_dataset(n_classes=4, per_class=3, size=4, channels=1):
    images = np.arange(n_classes * per_class * channels * size * size, dtype=float)
    images = images.reshape(n_classes * per_class, channels, size, size)
    labels = np.repeat(np.arange(n_classes), per_class)
    return Dataset("small", 0, images, labels, {"test": np.arange(n_classes)})


class TestDataset:

    def test_overlapping_splits(self):
        with pytest.raises(EpisodeError, match="both"):
            Dataset("bad", 0, np.zeros((2, 1, 2, 2)), [0, 1], {"train": [0, 1], "test": [1]})

    def test_length_mismatch(self):
        with pytest.raises(EpisodeError, match="labels"):
            Dataset("bad", 0, np.zeros((3, 1, 2, 2)), [0, 1], {"test": [0, 1]})

    def test_needs_nchw(self):
        with pytest.raises(EpisodeError, match="NCHW"):
            Dataset("bad", 0, np.zeros((3, 2, 2)), [0, 1, 1], {"test": [0, 1]})

    def test_unknown_split(self):
        with pytest.raises(EpisodeError):
            small_dataset().split_indices("holdout")

    def test_statistics_come_from_training_split(self):
        images = np.concatenate([np.full((2, 1, 2, 2), 1.0), np.full((2, 1, 2, 2), 5.0)])
        dataset = Dataset("stats", 0, images, [0, 0, 1, 1], {"train": [0], "test": [1]})
        np.testing.assert_allclose(dataset.channel_mean, [1.0])
        np.testing.assert_allclose(dataset.channel_std, [1.0])
        train_images, train_labels = dataset.split_arrays("train")
        assert not train_images.any()
        np.testing.assert_array_equal(train_labels, [0, 0])

    def test_class_indices(self):
        per_class = small_dataset().class_indices("test")
        assert sorted(per_class) == [0, 1, 2, 3]
        np.testing.assert_array_equal(per_class[2], [6, 7, 8])


class TestFitToBackbone:

    def test_pads_and_tiles(self):
        fitted = fit_to_backbone(small_dataset(size=4), resolution=8)
        assert fitted.images.shape == (12, 3, 8, 8)
        original = small_dataset(size=4).images
        np.testing.assert_array_equal(fitted.images[:, 1, 2:6, 2:6], original[:, 0])
        assert not fitted.images[:, :, :2].any()

    def test_crops(self):
        fitted = fit_to_backbone(small_dataset(size=6), resolution=4, channels=1)
        np.testing.assert_array_equal(fitted.images, small_dataset(size=6).images[:, :, 1:5, 1:5])

    def test_rejects_channel_count(self):
        with pytest.raises(EpisodeError):
            fit_to_backbone(small_dataset(channels=2), resolution=4)


class TestSyntheticDomains:

    @pytest.mark.parametrize("kwargs", [
        {"family": "blur"},
        {"n_classes": 1},
        {"images_per_class": 0},
    ])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValueError):
            SyntheticDomainSpec("bad", **kwargs)

    def test_overlapping_unseen_rotation(self):
        specs = [
            SyntheticDomainSpec("seen", "rotation", {"angle_range": (0.0, 30.0)}),
            SyntheticDomainSpec("unseen", "rotation", {"angle_range": (20.0, 50.0)}, seen=False),
        ]
        with pytest.raises(ValueError, match="overlaps"):
            check_unseen_disjoint(specs)

    def test_reused_mixing_matrix(self):
        specs = [
            SyntheticDomainSpec("seen", "channel_mix", {"matrix": SWAP}),
            SyntheticDomainSpec("unseen", "channel_mix", {"matrix": SWAP}, seen=False),
        ]
        with pytest.raises(ValueError, match="reuses"):
            check_unseen_disjoint(specs)

    def test_default_suite_is_disjoint(self):
        suite = default_domain_suite()
        check_unseen_disjoint(suite)
        assert sum(s.seen for s in suite) == 4
        assert sum(not s.seen for s in suite) == 3

    def test_needs_specs(self):
        with pytest.raises(ValueError):
            gen_synthetic_domains([])

    def test_shapes_and_groups(self, tiny_datasets):
        plain, swapped = tiny_datasets
        assert plain.images.shape == (160, 3, 8, 8)
        assert plain.group == "seen"
        assert swapped.group == "unseen"
        assert len(swapped.splits["test"]) == 8

    def test_reproducible(self):
        first = gen_synthetic_domains(tiny_domain_specs(n_classes=3, images_per_class=2), seed=9)
        second = gen_synthetic_domains(tiny_domain_specs(n_classes=3, images_per_class=2), seed=9)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.images, b.images)

    def test_shared_prototypes_differ_only_by_transform(self):
        common = dict(n_classes=3, images_per_class=4, resolution=8)
        specs = [
            SyntheticDomainSpec("a", "identity", {}, True, 0, **common),
            SyntheticDomainSpec("b", "channel_mix", {"matrix": SWAP}, False, 0, **common),
        ]
        a, b = gen_synthetic_domains(specs, seed=1)
        np.testing.assert_allclose(b.images, mix_channels(a.images, SWAP), atol=1e-12)
        for split in ("train", "val", "test"):
            np.testing.assert_array_equal(a.splits[split], b.splits[split])

    @pytest.mark.parametrize("family,params", [
        ("rotation", {"angle_range": (60.0, 90.0)}),
        ("texture", {"frequency": 2.0, "amplitude": 0.3}),
        ("noise", {"sigma": 0.3}),
    ])
    def test_families_keep_shape(self, family, params):
        spec = SyntheticDomainSpec("f", family, params, n_classes=2, images_per_class=2, resolution=12)
        (dataset,) = gen_synthetic_domains([spec])
        assert dataset.images.shape == (4, 3, 12, 12)
        assert np.isfinite(dataset.images).all()

    def test_mix_channels(self):
        image = np.arange(3.0).reshape(1, 3, 1, 1)
        np.testing.assert_array_equal(mix_channels(image, SWAP).ravel(), [1.0, 2.0, 0.0])


class TestSampling:

    def test_five_way_one_shot(self, tiny_datasets):
        episode = sample_episode(tiny_datasets[0], "5way1shot", np.random.default_rng(0))
        assert episode.way == 5
        assert episode.shots == [1] * 5
        assert episode.support_images.shape == (5, 3, 8, 8)
        assert episode.query_images.shape == (5 * QUERY_PER_CLASS, 3, 8, 8)
        np.testing.assert_array_equal(episode.support_labels, np.arange(5))
        assert not set(episode.support_index) & set(episode.query_index)

    def test_labels_follow_classes(self, tiny_datasets):
        dataset = tiny_datasets[0]
        episode = sample_episode(dataset, "vw5shot", np.random.default_rng(1))
        original = dataset.labels[episode.query_index]
        np.testing.assert_array_equal(episode.classes[episode.query_labels], original)
        assert episode.shots == [5] * episode.way
        assert 5 <= episode.way <= 8

    @pytest.mark.parametrize("index", range(10))
    def test_varying_protocol_bounds(self, tiny_datasets, index):
        episode = sample_episode(tiny_datasets[1], "varying", episode_rng(0, 1, index), episode_index=index)
        assert 5 <= episode.way <= 8
        assert all(1 <= s <= MAX_SHOTS for s in episode.shots)
        assert len(episode.support_labels) == sum(episode.shots)
        assert episode.episode_index == index

    def test_support_and_query_never_share_images(self, tiny_datasets):
        dataset = tiny_datasets[1]
        for i in range(1000):
            episode = sample_episode(dataset, "varying", episode_rng(0, dataset.domain_id, i), episode_index=i)
            support = {hashlib.sha256(image.tobytes()).hexdigest() for image in episode.support_images}
            query = {hashlib.sha256(image.tobytes()).hexdigest() for image in episode.query_images}
            assert not support & query, f"episode {i}"
            assert not set(episode.support_index) & set(episode.query_index)

    def test_same_rng_same_episode(self, tiny_datasets):
        first = sample_episode(tiny_datasets[0], "varying", episode_rng(7, 0, 3))
        second = sample_episode(tiny_datasets[0], "varying", episode_rng(7, 0, 3))
        np.testing.assert_array_equal(first.support_index, second.support_index)
        np.testing.assert_array_equal(first.query_index, second.query_index)

    def test_unknown_protocol(self, tiny_datasets):
        with pytest.raises(EpisodeError, match="protocol"):
            sample_episode(tiny_datasets[0], "10way", np.random.default_rng(0))

    def test_too_few_classes(self):
        with pytest.raises(EpisodeError, match="at least 5"):
            sample_episode(small_dataset(n_classes=4), "5way1shot", np.random.default_rng(0))

    def test_too_few_images(self):
        with pytest.raises(EpisodeError, match="needs"):
            sample_episode(small_dataset(n_classes=5, per_class=3), "5way1shot", np.random.default_rng(0))


class TestChannelShift:

    def test_identity_shift_is_plain_episode(self, tiny_datasets):
        plain = sample_episode(tiny_datasets[0], "5way1shot", np.random.default_rng(2))
        shifted = make_channel_shift_episode(tiny_datasets[0], np.eye(3), "5way1shot", np.random.default_rng(2))
        np.testing.assert_array_equal(shifted.support_images, plain.support_images)
        np.testing.assert_array_equal(shifted.query_labels, plain.query_labels)

    def test_mixes_normalized_pixels(self, tiny_datasets):
        m = random_mixing_matrix(np.random.default_rng(0))
        plain = sample_episode(tiny_datasets[0], "5way1shot", np.random.default_rng(4))
        shifted = make_channel_shift_episode(tiny_datasets[0], m, "5way1shot", np.random.default_rng(4))
        np.testing.assert_allclose(shifted.query_images, mix_channels(plain.query_images, m), atol=1e-12)

    def test_ill_conditioned(self, tiny_datasets):
        m = np.diag([1.0, 1.0, 1e-3])
        with pytest.raises(EpisodeError, match="ill-conditioned"):
            make_channel_shift_episode(tiny_datasets[0], m, "5way1shot", np.random.default_rng(0))

    def test_wrong_shape(self, tiny_datasets):
        with pytest.raises(EpisodeError, match="3x3"):
            make_channel_shift_episode(tiny_datasets[0], np.eye(2), "5way1shot", np.random.default_rng(0))

    @pytest.mark.parametrize("seed", range(5))
    def test_random_mixing_is_well_conditioned(self, seed):
        assert np.linalg.cond(random_mixing_matrix(np.random.default_rng(seed))) < 10.0
