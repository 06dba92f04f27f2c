"""Encoders producing the three-level feature pyramid the decoders consume.

Only the stride-8/16/32 feature maps (e3, e4, e5) are exposed; the two
shallowest encoder levels are deliberately dropped because their skip
connections are redundant for this task. Two variants exist:

* ``standard`` - an EfficientNetB0-style encoder (MBConv stages with
  squeeze-excitation and swish) truncated after the stride-32 stage.
* ``tiny`` - four strided conv-bn-relu stages (~25k parameters) so the
  full test suite and desk-scale training runs need no external weights.

Each consumed level is then reduced to a uniform 64-channel representation
by 1x1 convolutions before entering the decoders.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import autograd as ag
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, DepthwiseConv2d, Linear, Module, ModuleList

INPUT_SIZE = 224
REDUCED_CHANNELS = 64


class FeaturePyramid(NamedTuple):
    e3: ag.Tensor  # stride 8,  (B, C3, 28, 28) for 224 input
    e4: ag.Tensor  # stride 16, (B, C4, 14, 14)
    e5: ag.Tensor  # stride 32, (B, C5, 7, 7)


class ReducedPyramid(NamedTuple):
    r3: ag.Tensor
    r4: ag.Tensor
    r5: ag.Tensor


@dataclass
class BackboneConfig:
    variant: str = "tiny"
    weights_path: Optional[str] = None
    freeze: bool = False

    def __post_init__(self):
        if self.variant not in ("standard", "tiny"):
            raise ConfigError(f"unknown backbone variant {self.variant!r}")


def validate_image_batch(x):
    shape = x.shape
    if len(shape) != 4 or shape[1] != 3 or shape[2] != INPUT_SIZE or shape[3] != INPUT_SIZE:
        raise ShapeError(f"expected image batch (B, 3, {INPUT_SIZE}, {INPUT_SIZE}), got {shape}")


class _ConvBnRelu(Module):
    def __init__(self, cin, cout, kernel, stride, rng):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return ag.relu(self.bn(self.conv(x)))


class TinyBackbone(Module):
    """Four strided stages reaching strides 4/8/16/32; taps at 8/16/32."""

    feature_channels = (24, 32, 40)

    def __init__(self, rng):
        super().__init__()
        self.stage1 = _ConvBnRelu(3, 16, 7, 4, rng)
        self.stage2 = _ConvBnRelu(16, 24, 3, 2, rng)
        self.stage3 = _ConvBnRelu(24, 32, 3, 2, rng)
        self.stage4 = _ConvBnRelu(32, 40, 3, 2, rng)

    def forward(self, x):
        h = self.stage1(x)
        e3 = self.stage2(h)
        e4 = self.stage3(e3)
        e5 = self.stage4(e4)
        return FeaturePyramid(e3, e4, e5)


class _MBConv(Module):
    """Inverted-residual block: expand, depthwise, squeeze-excite, project."""

    def __init__(self, cin, cout, kernel, stride, expand, rng, se_ratio=0.25):
        super().__init__()
        mid = cin * expand
        self.use_expand = expand != 1
        if self.use_expand:
            self.expand_conv = Conv2d(cin, mid, 1, rng, bias=False)
            self.expand_bn = BatchNorm2d(mid)
        self.dw = DepthwiseConv2d(mid, kernel, rng, stride=stride)
        self.dw_bn = BatchNorm2d(mid)
        squeezed = max(1, int(cin * se_ratio))
        self.se_reduce = Linear(mid, squeezed, rng)
        self.se_expand = Linear(squeezed, mid, rng)
        self.project = Conv2d(mid, cout, 1, rng, bias=False)
        self.project_bn = BatchNorm2d(cout)
        self.has_skip = stride == 1 and cin == cout
        self._mid = mid

    def forward(self, x):
        h = x
        if self.use_expand:
            h = ag.swish(self.expand_bn(self.expand_conv(h)))
        h = ag.swish(self.dw_bn(self.dw(h)))
        pooled = h.mean(axis=(2, 3))
        gate = ag.sigmoid(self.se_expand(ag.swish(self.se_reduce(pooled))))
        h = h * gate.reshape(h.shape[0], self._mid, 1, 1)
        h = self.project_bn(self.project(h))
        if self.has_skip:
            h = h + x
        return h


# (expand, out_channels, repeats, first stride, kernel) per stage; taps are
# taken after the stride-8, stride-16, and stride-32 stages.
_B0_STAGES = (
    (1, 16, 1, 1, 3),
    (6, 24, 2, 2, 3),
    (6, 40, 2, 2, 5),
    (6, 80, 3, 2, 3),
    (6, 112, 3, 1, 5),
    (6, 192, 4, 2, 5),
    (6, 320, 1, 1, 3),
)
_B0_TAPS = (2, 4, 6)  # stage indices yielding e3, e4, e5


class StandardBackbone(Module):
    feature_channels = (40, 112, 320)

    def __init__(self, rng):
        super().__init__()
        self.stem = Conv2d(3, 32, 3, rng, stride=2, bias=False)
        self.stem_bn = BatchNorm2d(32)
        stages = []
        cin = 32
        for expand, cout, repeats, stride, kernel in _B0_STAGES:
            blocks = []
            for r in range(repeats):
                blocks.append(_MBConv(cin, cout, kernel, stride if r == 0 else 1, expand, rng))
                cin = cout
            stages.append(ModuleList(blocks))
        self.stages = ModuleList(stages)

    def forward(self, x):
        h = ag.swish(self.stem_bn(self.stem(x)))
        taps = []
        for idx, stage in enumerate(self.stages):
            for block in stage:
                h = block(h)
            if idx in _B0_TAPS:
                taps.append(h)
        return FeaturePyramid(*taps)


class ChannelReducer(Module):
    """1x1 convolutions mapping each pyramid level to 64 channels."""

    def __init__(self, feature_channels, rng, out_channels=REDUCED_CHANNELS):
        super().__init__()
        self.out_channels = out_channels
        c3, c4, c5 = feature_channels
        self.reduce3 = Conv2d(c3, out_channels, 1, rng)
        self.reduce4 = Conv2d(c4, out_channels, 1, rng)
        self.reduce5 = Conv2d(c5, out_channels, 1, rng)

    def forward(self, pyr):
        return ReducedPyramid(self.reduce3(pyr.e3), self.reduce4(pyr.e4), self.reduce5(pyr.e5))


def build_backbone(cfg, rng):
    """Construct, optionally load, and optionally freeze a backbone."""
    backbone = StandardBackbone(rng) if cfg.variant == "standard" else TinyBackbone(rng)
    if cfg.weights_path is not None:
        load_backbone_weights(backbone, cfg.weights_path)
    if cfg.freeze:
        backbone.requires_grad_(False)
    return backbone


def extract_features(images, backbone):
    """Run the encoder on a (B,3,224,224) batch and return the pyramid."""
    images = ag.astensor(images)
    validate_image_batch(images)
    return backbone(images)


def reduce_channels(pyr, reducer):
    return reducer(pyr)


def save_backbone_weights(backbone, path):
    arrays = {k.replace("buffer:", "buf__"): v for k, v in backbone.state_dict().items()}
    np.savez(path, **arrays)


def load_backbone_weights(backbone, path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"backbone weights file not found: {path}")
    try:
        with np.load(path) as payload:
            state = {k.replace("buf__", "buffer:"): payload[k] for k in payload.files}
    except Exception as exc:
        raise ConfigError(f"could not read backbone weights {path}: {exc}") from exc
    try:
        backbone.load_state_dict(state)
    except Exception as exc:
        raise ConfigError(f"backbone weights {path} do not match this variant: {exc}") from exc
