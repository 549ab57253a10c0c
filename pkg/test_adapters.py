"""
Tests for adapter configuration, attachment, initialization and the
adapter arithmetic
"""

import logging

import numpy as np
import pytest

from conftest import TINY_SPEC
from src.utils.adapters import (
    AdapterConfig,
    AdapterConfigError,
    AdapterSite,
    apply_adapter,
    attach,
    bottleneck_size,
    effective_matrix,
    format_code,
    parse_attachment,
    parse_code,
    pre_classifier_align,
)
from src.utils.backbone import (
    RESNET18_REPLICA,
    ROLE_MAIN,
    BackboneWeights,
    LayerSite,
    forward_features,
)
from src.utils.tensor import ShapeError, Tensor


def make_site(connection, form, c_in=2, c_out=2, stride=1, **params):
    layer = LayerSite(1, 1, 1, c_in, c_out, ROLE_MAIN, 3, stride)
    return AdapterSite(layer, connection, form, {k: Tensor(np.asarray(v, dtype=float)) for k, v in params.items()})


def pixel(values):
    return np.asarray(values, dtype=float).reshape(1, -1, 1, 1)


class TestCodes:

    @pytest.mark.parametrize("code,connection,form,divisor,pa", [
        ("Ad-R-M", "residual", "matrix", None, False),
        ("Ad-S-CW", "serial", "channelwise", None, False),
        ("Ad-R-M-PA", "residual", "matrix", None, True),
        ("Ad-R-M-DN8", "residual", "decomposed", 8, False),
        ("Ad-S-M-DN32-PA", "serial", "decomposed", 32, True),
    ])
    def test_parse(self, code, connection, form, divisor, pa):
        config = parse_code(code)
        assert (config.connection, config.form, config.divisor, config.include_pa) == \
            (connection, form, divisor, pa)
        assert format_code(config) == code

    def test_beta_only_codes(self):
        assert not parse_code("none").enabled
        assert not parse_code("none").include_pa
        assert parse_code("none-PA").include_pa
        assert parse_code("none-PA").code == "none-PA"

    @pytest.mark.parametrize("code", ["Ad-X-M", "Ad-R-CW-DN8", "Ad-R-M-PA-PA", "Ad-R-M-DN4-DN8", "none-R", "R-M"])
    def test_rejects_bad_codes(self, code):
        with pytest.raises(AdapterConfigError):
            parse_code(code)

    def test_overrides(self):
        config = parse_code("Ad-R-M", attachment="block3,4", init="random")
        assert config.attachment == (3, 4)
        assert config.init == "random"


class TestAttachmentParsing:

    @pytest.mark.parametrize("value,expected", [
        ("all", "all"),
        ("block-all", "all"),
        ("block4", (4,)),
        ("block3,4", (3, 4)),
        ("block2-4", (2, 3, 4)),
        ("4,3,3", (3, 4)),
        ([4, 1], (1, 4)),
    ])
    def test_forms(self, value, expected):
        assert parse_attachment(value) == expected

    @pytest.mark.parametrize("value", ["blockx", "0", "", [], "block-1"])
    def test_rejects(self, value):
        with pytest.raises(AdapterConfigError):
            parse_attachment(value)


class TestConfigValidation:

    def test_decomposed_needs_divisor(self):
        with pytest.raises(AdapterConfigError, match="divisor"):
            AdapterConfig(form="decomposed")
        with pytest.raises(AdapterConfigError, match="divisor"):
            AdapterConfig(form="decomposed", divisor=1)

    def test_divisor_only_for_decomposed(self):
        with pytest.raises(AdapterConfigError):
            AdapterConfig(form="matrix", divisor=4)

    def test_decompose_stages_need_decomposed_form(self):
        with pytest.raises(AdapterConfigError):
            AdapterConfig(decompose_stages=(3, 4))

    @pytest.mark.parametrize("kwargs", [{"connection": "parallel"}, {"form": "diagonal"},
                                        {"init": "zeros"}, {"delta": -1.0}])
    def test_unknown_values(self, kwargs):
        with pytest.raises(AdapterConfigError):
            AdapterConfig(**kwargs)

    def test_stage_out_of_range(self, tiny_backbone):
        with pytest.raises(AdapterConfigError, match="do not exist"):
            attach(tiny_backbone, parse_code("Ad-R-M", attachment="block3"))

    def test_residual_channelwise_strict(self, tiny_backbone):
        with pytest.raises(AdapterConfigError, match="illegal"):
            attach(tiny_backbone, parse_code("Ad-R-CW"))

    def test_residual_channelwise_lenient_skips(self, tiny_backbone):
        model = attach(tiny_backbone, parse_code("Ad-R-CW", strict=False))
        assert set(model.sites) == {"stage1.block1.conv1", "stage1.block1.conv2", "stage2.block1.conv2"}

    def test_bottleneck_size(self):
        assert bottleneck_size(512, 32) == 16
        assert bottleneck_size(10, 4) == 3
        assert bottleneck_size(4, 32) == 1


class TestAttach:

    def test_replica_trainable_count(self):
        backbone = BackboneWeights(RESNET18_REPLICA, {})
        model = attach(backbone, parse_code("Ad-R-M-PA"))
        assert model.trainable_count() == 1_482_752
        assert len(model.sites) == 16

    def test_decomposed_shapes(self, tiny_backbone):
        model = attach(tiny_backbone, parse_code("Ad-R-M-DN2"))
        site = model.sites["stage2.block1.conv1"]
        assert site.params["V"].shape == (8, 4)
        assert site.params["gamma"].shape == (4, 4)
        assert effective_matrix(site).shape == (8, 4)

    def test_partial_decomposition(self, tiny_backbone):
        model = attach(tiny_backbone, parse_code("Ad-R-M-DN2", decompose_stages=(2,)))
        assert model.sites["stage1.block1.conv1"].form == "matrix"
        assert model.sites["stage2.block1.conv1"].form == "decomposed"

    def test_beta_is_identity(self, tiny_backbone, tiny_images):
        model = attach(tiny_backbone, parse_code("none-PA"))
        assert model.sites == {}
        np.testing.assert_array_equal(model.beta.data, np.eye(TINY_SPEC.feature_dim))
        np.testing.assert_allclose(model.embed(tiny_images).data, model.features(tiny_images).data, atol=1e-12)
        assert model.trainable_count() == TINY_SPEC.feature_dim ** 2

    def test_no_adapters(self, tiny_backbone):
        model = attach(tiny_backbone, parse_code("none"))
        assert model.trainable_parameters() == []
        assert model.hooks() == {}

    def test_random_init_is_seeded(self, tiny_backbone):
        config = parse_code("Ad-R-M", init="random")
        first = attach(tiny_backbone, config, seed=4)
        second = attach(tiny_backbone, config, seed=4)
        other = attach(tiny_backbone, config, seed=5)
        for name, site in first.sites.items():
            np.testing.assert_array_equal(site.params["alpha"].data, second.sites[name].params["alpha"].data)
        assert not np.array_equal(first.sites["stage1.block1.conv1"].params["alpha"].data,
                                  other.sites["stage1.block1.conv1"].params["alpha"].data)

    def test_serial_decomposed_warns(self, tiny_backbone, caplog):
        with caplog.at_level(logging.WARNING, logger="src.utils.adapters"):
            attach(tiny_backbone, parse_code("Ad-S-M-DN2"))
        assert "rank-B" in caplog.text

    def test_clone_is_independent(self, tiny_backbone):
        model = attach(tiny_backbone, parse_code("Ad-R-M-PA"))
        copy = model.clone()
        copy.sites["stage1.block1.conv1"].params["alpha"].data += 1.0
        copy.beta.data += 1.0
        assert model.sites["stage1.block1.conv1"].params["alpha"].data.max() < 1.0
        np.testing.assert_array_equal(model.beta.data, np.eye(TINY_SPEC.feature_dim))
        assert copy.backbone is model.backbone


class TestArithmetic:

    def test_residual_matrix(self):
        site = make_site("residual", "matrix", alpha=[[1.0, 0.0], [0.0, 2.0]])
        out = apply_adapter(pixel([1.0, 2.0]), pixel([10.0, 20.0]), site)
        np.testing.assert_allclose(out.data.ravel(), [11.0, 24.0])

    def test_serial_matrix(self):
        site = make_site("serial", "matrix", alpha=[[0.0, 1.0], [1.0, 0.0]])
        out = apply_adapter(pixel([1.0, 2.0]), pixel([10.0, 20.0]), site)
        np.testing.assert_allclose(out.data.ravel(), [20.0, 10.0])

    def test_serial_channelwise(self):
        site = make_site("serial", "channelwise", alpha=[2.0, 3.0])
        out = apply_adapter(pixel([1.0, 2.0]), pixel([10.0, 20.0]), site)
        np.testing.assert_allclose(out.data.ravel(), [20.0, 60.0])

    def test_residual_channelwise(self):
        site = make_site("residual", "channelwise", alpha=[2.0, 3.0])
        out = apply_adapter(pixel([1.0, 2.0]), pixel([10.0, 20.0]), site)
        np.testing.assert_allclose(out.data.ravel(), [12.0, 26.0])

    def test_residual_branch_follows_stride(self, rng):
        h = rng.standard_normal((1, 2, 4, 4))
        conv_out = np.zeros((1, 2, 2, 2))
        site = make_site("residual", "matrix", stride=2, alpha=np.eye(2))
        out = apply_adapter(h, conv_out, site)
        np.testing.assert_allclose(out.data, h[:, :, ::2, ::2])

    def test_channel_changing_residual(self, rng):
        h = rng.standard_normal((2, 3, 2, 2))
        alpha = rng.standard_normal((4, 3))
        site = make_site("residual", "matrix", c_in=3, c_out=4, alpha=alpha)
        out = apply_adapter(h, np.zeros((2, 4, 2, 2)), site)
        np.testing.assert_allclose(out.data, np.einsum("oc,nchw->nohw", alpha, h), atol=1e-12)

    def test_decomposed_matches_equivalent_matrix(self, rng):
        v, gamma = rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
        h, conv_out = rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 4, 3, 3))
        decomposed = make_site("residual", "decomposed", c_in=3, c_out=4, V=v, gamma=gamma)
        matrix = make_site("residual", "matrix", c_in=3, c_out=4, alpha=v @ gamma.T)
        np.testing.assert_allclose(apply_adapter(h, conv_out, decomposed).data,
                                   apply_adapter(h, conv_out, matrix).data, atol=1e-12)

    def test_channelwise_shape_mismatch(self):
        site = make_site("serial", "channelwise", alpha=[1.0, 1.0, 1.0])
        with pytest.raises(ShapeError):
            apply_adapter(pixel([1.0, 2.0]), pixel([1.0, 2.0]), site)

    def test_channelwise_has_no_matrix(self):
        with pytest.raises(AdapterConfigError):
            effective_matrix(make_site("serial", "channelwise", alpha=[1.0, 1.0]))

    def test_pre_classifier_align(self):
        z = np.array([[1.0, 2.0]])
        beta = np.array([[0.0, 1.0], [1.0, 1.0]])
        np.testing.assert_allclose(pre_classifier_align(z, beta).data, [[2.0, 3.0]])
        with pytest.raises(ShapeError):
            pre_classifier_align(z, np.eye(3))
        with pytest.raises(ShapeError):
            pre_classifier_align(z, np.ones((2, 3)))


class TestIdentityStart:

    @pytest.mark.parametrize("code", ["Ad-S-M", "Ad-S-CW", "Ad-R-M", "Ad-R-CW"])
    def test_exact_identity_at_zero_delta(self, tiny_backbone, tiny_images, code):
        model = attach(tiny_backbone, parse_code(code, delta=0.0, strict=False))
        plain = forward_features(tiny_backbone, tiny_images).data
        np.testing.assert_array_equal(model.features(tiny_images).data, plain)

    @pytest.mark.parametrize("code", ["Ad-S-M", "Ad-S-CW", "Ad-R-M", "Ad-R-CW"])
    def test_identity_on_many_random_inputs(self, tiny_backbone, code):
        images = np.random.default_rng(11).standard_normal((100, 3, 8, 8))
        model = attach(tiny_backbone, parse_code(code, delta=0.0, strict=False))
        np.testing.assert_allclose(model.features(images).data, forward_features(tiny_backbone, images).data,
                                   rtol=0, atol=1e-12)

    def test_default_delta_is_near_identity(self, tiny_backbone, tiny_images):
        model = attach(tiny_backbone, parse_code("Ad-R-M"))
        plain = forward_features(tiny_backbone, tiny_images).data
        adapted = model.features(tiny_images).data
        gap = np.abs(adapted - plain).max()
        assert 0 < gap <= 1e-2 * np.abs(plain).max()

    def test_backbone_untouched(self, tiny_backbone, tiny_images):
        before = {name: t.data.copy() for name, t in tiny_backbone.tensors.items()}
        attach(tiny_backbone, parse_code("Ad-R-M-PA")).embed(tiny_images)
        for name, t in tiny_backbone.tensors.items():
            np.testing.assert_array_equal(t.data, before[name])
