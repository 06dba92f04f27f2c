"""Decoder wiring, prediction heads, and whole-model contracts."""

import numpy as np
import pytest

from plutonet import autograd as ag
from plutonet.backbone import BackboneConfig, FeaturePyramid, ReducedPyramid
from plutonet.decoders import (
    AUX_PARAM_BUDGET,
    AuxiliaryDecoder,
    DecoderLayer,
    ModelConfig,
    PartialDecoder,
    PlutoNet,
    PredictionHead,
    count_parameters,
    model_forward,
)
from plutonet.errors import ConfigError, ShapeError

from helpers import param_checksum


def _reduced(batch=2, seed=0, fill=None):
    rng = np.random.default_rng(seed)

    def level(h):
        if fill is not None:
            return ag.Tensor(np.full((batch, 64, h, h), fill, dtype=np.float32))
        return ag.Tensor(rng.random((batch, 64, h, h), dtype=np.float32))

    return ReducedPyramid(level(28), level(14), level(7))


def _pyramid(batch=2, seed=0):
    rng = np.random.default_rng(seed)
    return FeaturePyramid(
        ag.Tensor(rng.random((batch, 24, 28, 28), dtype=np.float32)),
        ag.Tensor(rng.random((batch, 32, 14, 14), dtype=np.float32)),
        ag.Tensor(rng.random((batch, 40, 7, 7), dtype=np.float32)),
    )


class TestPartialDecoder:
    def test_state_scales(self):
        decoder = PartialDecoder(np.random.default_rng(0)).eval()
        state = decoder(_reduced())
        assert state.d1.shape == (2, 64, 7, 7)
        assert state.d2.shape == (2, 64, 14, 14)
        assert state.d3.shape == (2, 64, 28, 28)

    def test_each_layer_concatenates_192_channels(self):
        decoder = PartialDecoder(np.random.default_rng(0))
        for layer in (decoder.layer1, decoder.layer2, decoder.layer3):
            assert layer.in_channels == 3 * 64 == 192
            assert layer.acb.in_channels == 192

    def test_zero_pyramid_zero_state_with_zeroed_decoder(self):
        decoder = PartialDecoder(np.random.default_rng(0)).eval()
        for p in decoder.parameters():
            p.data[:] = 0.0
        # squeeze-excitation gates land at 0.5 but scale zero activations
        state = decoder(_reduced(fill=0.0))
        for t in state:
            assert np.all(t.data == 0.0)

    def test_wiring_mismatch_raises(self):
        layer = DecoderLayer(np.random.default_rng(0))
        bad = [ag.Tensor(np.zeros((1, 32, 7, 7), dtype=np.float32)) for _ in range(3)]
        with pytest.raises(ShapeError):
            layer(bad, (7, 7))


class TestPredictionHead:
    def test_zero_features_give_half_probability(self):
        head = PredictionHead(np.random.default_rng(0))
        out = head(ag.Tensor(np.zeros((2, 64, 28, 28), dtype=np.float32)), (224, 224))
        np.testing.assert_array_equal(out.data, np.full((2, 1, 224, 224), 0.5, dtype=np.float32))

    def test_shape_contract(self):
        head = PredictionHead(np.random.default_rng(0))
        x = ag.Tensor(np.random.default_rng(1).random((2, 64, 28, 28), dtype=np.float32))
        assert head(x, (224, 224)).shape == (2, 1, 224, 224)

    def test_parameter_count_is_65(self):
        head = PredictionHead(np.random.default_rng(0))
        assert head.num_trainable() == 64 + 1 == 65


class TestAuxiliaryDecoder:
    def test_default_parameter_count_149_within_budget(self):
        aux = AuxiliaryDecoder(np.random.default_rng(0), hidden_channels=4)
        # (3*9*4+4) + (4*9*1+1)
        assert aux.num_trainable() == 149 <= AUX_PARAM_BUDGET

    def test_single_conv_variant_within_budget(self):
        aux = AuxiliaryDecoder(np.random.default_rng(0), hidden_channels=0)
        assert aux.num_trainable() == 3 * 9 + 1 == 28

    def test_oversized_hidden_rejected(self):
        with pytest.raises(ConfigError):
            AuxiliaryDecoder(np.random.default_rng(0), hidden_channels=16)

    def test_attention_products_single_pixel(self):
        aux = AuxiliaryDecoder(np.random.default_rng(0))
        a, b, c = 0.7, -0.3, 1.9
        pyr = FeaturePyramid(
            ag.Tensor(np.full((1, 2, 1, 1), a, dtype=np.float32)),
            ag.Tensor(np.full((1, 3, 1, 1), b, dtype=np.float32)),
            ag.Tensor(np.full((1, 5, 1, 1), c, dtype=np.float32)),
        )
        maps = aux.attention_maps(pyr)
        np.testing.assert_allclose(
            maps.data[0, :, 0, 0], [a * b * c, b * c, c], rtol=1e-6
        )

    def test_zero_pyramid_constant_mask_matches_hand_chain(self):
        aux = AuxiliaryDecoder(np.random.default_rng(3))
        pyr = FeaturePyramid(
            ag.Tensor(np.zeros((1, 2, 28, 28), dtype=np.float32)),
            ag.Tensor(np.zeros((1, 3, 14, 14), dtype=np.float32)),
            ag.Tensor(np.zeros((1, 5, 7, 7), dtype=np.float32)),
        )
        out = aux(pyr, (224, 224)).data
        # zero products: conv1 emits its bias, conv2 sees a constant plane
        b1 = aux.conv1.bias.data
        w2 = aux.conv2.weight.data
        logit = float((w2.sum(axis=(2, 3)) @ np.maximum(b1, 0.0) + aux.conv2.bias.data)[0])
        expected = 1.0 / (1.0 + np.exp(-logit))
        assert float(np.ptp(out)) < 1e-6
        np.testing.assert_allclose(out, expected, rtol=1e-5)


@pytest.fixture(scope="module")
def model():
    return PlutoNet(BackboneConfig(variant="tiny"), seed=5)


class TestPlutoNetModel:
    def _images(self, batch=2, seed=0):
        return np.random.default_rng(seed).random((batch, 3, 224, 224), dtype=np.float32)

    def test_training_mode_produces_both_masks(self, model):
        main, aux = model_forward(self._images(), model, training=True)
        assert main.shape == (2, 1, 224, 224)
        assert aux.shape == (2, 1, 224, 224)
        for t in (main, aux):
            assert t.data.min() >= 0.0 and t.data.max() <= 1.0

    def test_inference_mode_has_no_auxiliary(self, model):
        main, aux = model_forward(self._images(), model, training=False)
        assert aux is None
        assert main.shape == (2, 1, 224, 224)

    def test_eval_forward_is_repeatable(self, model):
        x = self._images(seed=2)
        a, _ = model.forward(x, training=False)
        b, _ = model.forward(x, training=False)
        np.testing.assert_array_equal(a.data, b.data)

    def test_mode_toggle_leaves_params_and_eval_output_alone(self, model):
        x = self._images(seed=3)
        before = param_checksum(model)
        out1, _ = model.forward(x, training=False)
        model.train(True)
        model.train(False)
        out2, _ = model.forward(x, training=False)
        np.testing.assert_array_equal(out1.data, out2.data)
        # a training-mode forward may update normalization buffers but
        # must never touch parameters
        model.forward(x, training=True)
        assert param_checksum(model) == before

    def test_gradients_reach_shared_backbone_from_both_masks(self):
        model = PlutoNet(BackboneConfig(variant="tiny"), seed=8)
        x = self._images(seed=4)
        main, aux = model.forward(x, training=True)
        (main.sum() + aux.sum()).backward()
        backbone_grads = [p.grad for p in model.backbone.parameters()]
        assert any(g is not None and np.abs(g).max() > 0 for g in backbone_grads)

    def test_count_parameters_partition(self, model):
        counts = count_parameters(model)
        parts = [counts[k] for k in ("backbone", "reducers", "partial_decoder", "head", "auxiliary")]
        assert counts["total"] == sum(parts)
        assert counts["auxiliary"] <= AUX_PARAM_BUDGET
        assert counts["total"] < 1_000_000  # tiny default stays desk-scale

    def test_removing_auxiliary_shifts_total_by_exactly_aux(self, model):
        bare = PlutoNet(
            BackboneConfig(variant="tiny"),
            ModelConfig(include_auxiliary=False),
            seed=5,
        )
        with_aux = count_parameters(model)
        without = count_parameters(bare)
        assert without["auxiliary"] == 0
        assert with_aux["total"] - without["total"] == with_aux["auxiliary"]

    def test_forced_aux_in_eval_mode(self, model):
        main, aux = model.forward(self._images(), training=False, with_aux=True)
        assert aux is not None and aux.shape == main.shape
