"""The two decoders and the assembled segmentation model.

The partial decoder consumes only the reduced stride-8/16/32 pyramid and
wires it with full-scale skip connections:

    d1 = se(acb(cat(r3, r4, r5)))   at the stride-32 scale (7x7)
    d2 = se(acb(cat(d1, r3, r5)))   at the stride-16 scale (14x14)
    d3 = se(acb(cat(d1, d2, r5)))   at the stride-8 scale  (28x28)

Every concatenation input is bilinearly resized to the layer's scale
first, so each layer sees exactly 3*64 = 192 channels. The deepest level
r5 feeds all three layers; d3 carries the finest detail and feeds the
prediction head.

The auxiliary decoder is a training-only attention head built from
parameter-free channel averages of the raw pyramid: the three maps are
brought to the stride-8 scale and combined as (m3*m4*m5, m4*m5, m5),
then passed through a tiny convolution stack. It adds ~150 trainable
parameters (hard budget 300) and is dropped at inference time.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .backbone import (
    REDUCED_CHANNELS,
    BackboneConfig,
    ChannelReducer,
    build_backbone,
    validate_image_batch,
)
from .blocks import AsymmetricConvBlock, SqueezeExcitation, resize_to
from .errors import ConfigError, ShapeError
from .layers import Conv2d, Module

# Parameter count reported for the original PlutoNet (EfficientNetB0
# encoder); printed by the parameter audit for comparison.
PUBLISHED_PARAM_COUNT = 2_626_537

# Hard ceiling on auxiliary-decoder trainable parameters (the original
# design quotes roughly 200).
AUX_PARAM_BUDGET = 300


class DecoderState(NamedTuple):
    d1: ag.Tensor  # (B, 64, 7, 7)
    d2: ag.Tensor  # (B, 64, 14, 14)
    d3: ag.Tensor  # (B, 64, 28, 28)


@dataclass
class ModelConfig:
    se_reduction: int = 4
    aux_hidden_channels: int = 4
    include_auxiliary: bool = True


class DecoderLayer(Module):
    """Resize-concat three 64-channel inputs, then acb followed by se."""

    def __init__(self, rng, channels=REDUCED_CHANNELS, n_inputs=3, se_reduction=4):
        super().__init__()
        self.in_channels = n_inputs * channels
        self.acb = AsymmetricConvBlock(self.in_channels, channels, rng)
        self.se = SqueezeExcitation(channels, rng, reduction=se_reduction)

    def forward(self, inputs, target_hw):
        merged = ag.concat([resize_to(t, target_hw) for t in inputs], axis=1)
        if merged.shape[1] != self.in_channels:
            raise ShapeError(
                f"decoder wiring bug: expected {self.in_channels} concatenated channels, "
                f"got {merged.shape[1]}"
            )
        return self.se(self.acb(merged))


class PartialDecoder(Module):
    def __init__(self, rng, channels=REDUCED_CHANNELS, se_reduction=4):
        super().__init__()
        self.layer1 = DecoderLayer(rng, channels, 3, se_reduction)
        self.layer2 = DecoderLayer(rng, channels, 3, se_reduction)
        self.layer3 = DecoderLayer(rng, channels, 3, se_reduction)

    def forward(self, red):
        hw3 = red.r3.shape[2:]
        hw4 = red.r4.shape[2:]
        hw5 = red.r5.shape[2:]
        d1 = self.layer1([red.r3, red.r4, red.r5], hw5)
        d2 = self.layer2([d1, red.r3, red.r5], hw4)
        d3 = self.layer3([d1, d2, red.r5], hw3)
        return DecoderState(d1, d2, d3)


class PredictionHead(Module):
    """1x1 conv to one channel, upsample to the image size, sigmoid."""

    def __init__(self, rng, in_channels=REDUCED_CHANNELS):
        super().__init__()
        self.conv = Conv2d(in_channels, 1, 1, rng)

    def forward(self, d3, out_hw):
        return ag.sigmoid(resize_to(self.conv(d3), out_hw))


class AuxiliaryDecoder(Module):
    def __init__(self, rng, hidden_channels=4):
        super().__init__()
        if hidden_channels > 0:
            self.conv1 = Conv2d(3, hidden_channels, 3, rng)
            self.conv2 = Conv2d(hidden_channels, 1, 3, rng)
        else:
            self.conv1 = Conv2d(3, 1, 3, rng)
            self.conv2 = None
        n = self.num_trainable()
        if n > AUX_PARAM_BUDGET:
            raise ConfigError(
                f"auxiliary decoder has {n} trainable parameters, budget is {AUX_PARAM_BUDGET}"
            )

    def attention_maps(self, pyr):
        """Stack the three shallow-attention products at the e3 scale."""
        hw = pyr.e3.shape[2:]
        m3 = pyr.e3.mean(axis=1, keepdims=True)
        m4 = resize_to(pyr.e4.mean(axis=1, keepdims=True), hw)
        m5 = resize_to(pyr.e5.mean(axis=1, keepdims=True), hw)
        return ag.concat([m3 * m4 * m5, m4 * m5, m5], axis=1)

    def forward(self, pyr, out_hw):
        h = self.conv1(self.attention_maps(pyr))
        if self.conv2 is not None:
            h = self.conv2(ag.relu(h))
        return ag.sigmoid(resize_to(h, out_hw))


class PlutoNet(Module):
    """Shared encoder, partial decoder with prediction head, and the
    training-only auxiliary decoder."""

    def __init__(self, backbone_cfg=None, model_cfg=None, seed=0):
        super().__init__()
        self.backbone_cfg = backbone_cfg or BackboneConfig()
        self.model_cfg = model_cfg or ModelConfig()
        self.init_seed = seed
        rng = np.random.default_rng(seed)
        self.backbone = build_backbone(self.backbone_cfg, rng)
        self.reducer = ChannelReducer(self.backbone.feature_channels, rng)
        self.partial_decoder = PartialDecoder(rng, se_reduction=self.model_cfg.se_reduction)
        self.head = PredictionHead(rng)
        if self.model_cfg.include_auxiliary:
            self.auxiliary = AuxiliaryDecoder(rng, self.model_cfg.aux_hidden_channels)
        else:
            self.auxiliary = None

    def forward(self, images, training=False, with_aux=None):
        """Return (main mask, auxiliary mask or None).

        The auxiliary branch is computed only in training mode (or when
        forced via with_aux); inference runs the main branch alone.
        """
        self.train(training)
        images = ag.astensor(images)
        validate_image_batch(images)
        pyr = self.backbone(images)
        red = self.reducer(pyr)
        state = self.partial_decoder(red)
        out_hw = (images.shape[2], images.shape[3])
        main = self.head(state.d3, out_hw)
        if with_aux is None:
            with_aux = training
        aux = None
        if with_aux and self.auxiliary is not None:
            aux = self.auxiliary(pyr, out_hw)
        return main, aux

    def predict(self, images):
        """Inference-mode probabilities as a plain array, no tape."""
        with ag.no_grad():
            main, _ = self.forward(images, training=False)
        return main.data


def model_forward(images, model, training):
    return model.forward(images, training=training)


def count_parameters(model):
    """Exact trainable-parameter counts per component; total = sum of parts."""
    parts = {
        "backbone": model.backbone.num_trainable(),
        "reducers": model.reducer.num_trainable(),
        "partial_decoder": model.partial_decoder.num_trainable(),
        "head": model.head.num_trainable(),
        "auxiliary": model.auxiliary.num_trainable() if model.auxiliary is not None else 0,
    }
    parts["total"] = sum(parts.values())
    return parts
