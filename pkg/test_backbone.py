"""
Tests for the backbone: site layout, forward pass, pretraining and
parameter accounting
"""

import numpy as np
import pytest

from conftest import TINY_SPEC
from src.utils.adapters import parse_code
from src.utils.backbone import (
    RESNET18_REPLICA,
    RESNET_S,
    BackboneSpec,
    PretrainConfig,
    count_parameters,
    domain_accuracy,
    enumerate_sites,
    expected_shapes,
    forward_features,
    init_weights,
    main_path_sites,
    pretrain_mdl,
)
from src.utils.episodes import Dataset
from src.utils.tensor import ShapeError


def expected_conv_params(spec):
    """Convolution parameters summed straight from the expected shape table"""
    return sum(
        int(np.prod(shape)) for shape in expected_shapes(spec).values()
        if len(shape) == 4
    )


def colour_dataset(n_per_class=24, seed=0, name="colours"):
    """Two classes that differ only in which channel is bright"""
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 0.2, size=(2 * n_per_class, 3, 8, 8))
    labels = np.repeat([0, 1], n_per_class)
    images[labels == 0, 0] += 0.7
    images[labels == 1, 2] += 0.7
    return Dataset(name, 0, images, labels, {"train": [0, 1]})


class TestSites:

    def test_tiny_layout(self):
        names = [s.name for s in enumerate_sites(TINY_SPEC)]
        assert names == [
            "stem.conv",
            "stage1.block1.conv1",
            "stage1.block1.conv2",
            "stage2.block1.conv1",
            "stage2.block1.conv2",
            "stage2.block1.down.conv",
        ]

    def test_first_block_of_later_stages_downsamples(self):
        for site in main_path_sites(RESNET_S):
            expected = 2 if (site.stage > 1 and site.block == 1 and site.conv_index == 1) else 1
            assert site.stride == expected

    def test_main_path_stage_filter(self):
        sites = main_path_sites(RESNET_S, stages=(4,))
        assert len(sites) == 4
        assert {s.stage for s in sites} == {4}

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            BackboneSpec(4, (), 1, 8)
        with pytest.raises(ValueError):
            BackboneSpec(4, (4,), 0, 8)

    def test_spec_dict_round_trip(self):
        assert BackboneSpec.from_dict(RESNET18_REPLICA.to_dict()) == RESNET18_REPLICA


class TestParameterCounts:

    def test_replica_backbone_count(self):
        counts = count_parameters(RESNET18_REPLICA)
        assert counts["backbone_params"] == expected_conv_params(RESNET18_REPLICA)
        assert counts["backbone_params"] == 11_166_912

    @pytest.mark.parametrize("code,expected", [
        ("Ad-R-M", 1_220_608),
        ("Ad-S-M", 1_392_640),
        ("Ad-R-M-PA", 1_482_752),
    ])
    def test_replica_adapter_counts(self, code, expected):
        counts = count_parameters(RESNET18_REPLICA, parse_code(code))
        assert counts["adapter_params"] == expected

    def test_replica_fractions(self):
        fraction = count_parameters(RESNET18_REPLICA, parse_code("Ad-R-M-PA"))["fraction"]
        assert fraction == pytest.approx(0.1328, abs=5e-4)
        assert count_parameters(RESNET18_REPLICA, parse_code("Ad-R-M"))["fraction"] == \
            pytest.approx(0.1093, abs=5e-4)

    def test_decomposed_late_stages(self):
        config = parse_code("Ad-R-M-DN32-PA", decompose_stages=(3, 4))
        counts = count_parameters(RESNET18_REPLICA, config)
        assert counts["adapter_params"] == 76_800 + 73_728 + 262_144
        assert counts["fraction"] == pytest.approx(0.03695, abs=5e-5)

    def test_small_backbone_last_stage(self):
        config = parse_code("Ad-R-M", attachment="block4")
        assert count_parameters(RESNET_S, config)["adapter_params"] == 57_344

    def test_count_accepts_weights(self, tiny_backbone):
        assert count_parameters(tiny_backbone) == count_parameters(TINY_SPEC)


class TestForward:

    def test_feature_shape(self, tiny_backbone, tiny_images):
        feats = forward_features(tiny_backbone, tiny_images)
        assert feats.shape == (6, TINY_SPEC.feature_dim)

    def test_zero_kernels_give_zero_features(self, tiny_images):
        weights = init_weights(TINY_SPEC, seed=3)
        for tensor in weights.tensors.values():
            if tensor.ndim == 4:
                tensor.data[:] = 0.0
        feats = forward_features(weights, tiny_images)
        assert not feats.data.any()

    def test_wrong_resolution(self, tiny_backbone, rng):
        with pytest.raises(ShapeError, match="Expected images"):
            forward_features(tiny_backbone, rng.standard_normal((2, 3, 16, 16)))

    def test_unknown_adapter_site(self, tiny_backbone, tiny_images):
        with pytest.raises(ShapeError, match="unknown"):
            forward_features(tiny_backbone, tiny_images, adapters={"stage9.block1.conv1": lambda h, y: y})

    def test_deterministic(self, tiny_backbone, tiny_images):
        first = forward_features(tiny_backbone, tiny_images).data
        second = forward_features(tiny_backbone, tiny_images).data
        assert first.tobytes() == second.tobytes()

    def test_batch_permutation_equivariance(self, tiny_backbone, tiny_images):
        perm = np.array([3, 0, 5, 1, 4, 2])
        feats = forward_features(tiny_backbone, tiny_images).data
        permuted = forward_features(tiny_backbone, tiny_images[perm]).data
        np.testing.assert_allclose(permuted, feats[perm], atol=1e-12)

    def test_identity_hooks_change_nothing(self, tiny_backbone, tiny_images):
        hooks = {s.name: (lambda h, y: y) for s in main_path_sites(TINY_SPEC)}
        plain = forward_features(tiny_backbone, tiny_images).data
        hooked = forward_features(tiny_backbone, tiny_images, adapters=hooks).data
        np.testing.assert_array_equal(plain, hooked)

    def test_check_shapes(self):
        weights = init_weights(TINY_SPEC)
        weights.check_shapes()
        del weights.tensors["stem.bn.var"]
        with pytest.raises(ShapeError, match="missing"):
            weights.check_shapes()


class TestPretraining:

    def test_zero_learning_rate_keeps_learnable_weights(self):
        config = PretrainConfig(steps=3, batch_size=8, lr=0.0, log_every=0)
        trained = pretrain_mdl([colour_dataset()], TINY_SPEC, config, seed=5)
        initial = init_weights(TINY_SPEC, seed=5)
        for name in initial.learnable_names():
            np.testing.assert_array_equal(trained.tensors[name].data, initial.tensors[name].data)

    def test_reproducible(self):
        config = PretrainConfig(steps=4, batch_size=8, log_every=0)
        first = pretrain_mdl([colour_dataset()], TINY_SPEC, config, seed=2)
        second = pretrain_mdl([colour_dataset()], TINY_SPEC, config, seed=2)
        assert first.history == second.history
        for name, tensor in first.tensors.items():
            np.testing.assert_array_equal(tensor.data, second.tensors[name].data)

    def test_one_head_per_domain(self):
        config = PretrainConfig(steps=1, batch_size=4, log_every=0)
        datasets = [colour_dataset(name="a"), colour_dataset(seed=1, name="b")]
        trained = pretrain_mdl(datasets, TINY_SPEC, config, seed=0)
        assert set(trained.heads) == {"head0.weight", "head0.bias", "head1.weight", "head1.bias"}
        assert trained.heads["head0.weight"].shape == (2, TINY_SPEC.feature_dim)
        assert all(not t.requires_grad for t in trained.tensors.values())

    def test_learns_separable_colours(self):
        config = PretrainConfig(steps=150, batch_size=16, lr=0.03, log_every=0)
        dataset = colour_dataset()
        trained = pretrain_mdl([dataset], TINY_SPEC, config, seed=0)
        assert np.mean(trained.history[-10:]) < np.mean(trained.history[:10])
        images, labels = dataset.split_arrays("train")
        assert domain_accuracy(trained, 0, images, labels) >= 0.9

    def test_snapshot_drops_heads(self):
        config = PretrainConfig(steps=1, batch_size=4, log_every=0)
        trained = pretrain_mdl([colour_dataset()], TINY_SPEC, config, seed=0)
        snapshot = trained.meta_test_snapshot()
        assert snapshot.heads == {}
        assert all(not t.requires_grad for t in snapshot.tensors.values())

    def test_needs_a_domain(self):
        with pytest.raises(ValueError, match="at least one domain"):
            pretrain_mdl([], TINY_SPEC)

    def test_needs_two_classes(self):
        images = np.zeros((4, 3, 8, 8))
        single = Dataset("single", 0, images, np.zeros(4), {"train": [0]})
        with pytest.raises(ValueError, match="at least 2"):
            pretrain_mdl([single], TINY_SPEC, PretrainConfig(steps=1))

    def test_empty_training_split(self):
        images = np.zeros((4, 3, 8, 8))
        held_out = Dataset("held-out", 0, images, np.array([0, 0, 1, 1]), {"test": [0, 1]})
        with pytest.raises(ValueError, match="no training images"):
            pretrain_mdl([held_out], TINY_SPEC, PretrainConfig(steps=1))
