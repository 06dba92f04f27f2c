"""Reusable decoder building blocks.

* :class:`AsymmetricConvBlock` - parallel 3x1 / 1x3 / 3x3 convolutions,
  each batch-normalized, summed, then rectified. The asymmetric branches
  make the kernels robust to appearance and aspect-ratio variation.
* :class:`SqueezeExcitation` - channel recalibration: global average pool,
  bottleneck MLP, sigmoid gate, per-channel rescale.
* :func:`resize_to` - parameter-free bilinear resampling used to bring
  feature maps to a common scale before concatenation or multiplication.
"""

import numpy as np

from . import autograd as ag
from .errors import ShapeError
from .layers import BatchNorm2d, Conv2d, Linear, Module


class AsymmetricConvBlock(Module):
    """relu(bn(conv3x1(x)) + bn(conv1x3(x)) + bn(conv3x3(x)))

    All three branches map in_channels -> out_channels with "same" padding,
    so the spatial size is preserved. Branch convolutions carry no bias
    (each is followed by its own batch normalization).
    """

    def __init__(self, in_channels, out_channels, rng):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv_3x1 = Conv2d(in_channels, out_channels, (3, 1), rng, bias=False)
        self.bn_3x1 = BatchNorm2d(out_channels)
        self.conv_1x3 = Conv2d(in_channels, out_channels, (1, 3), rng, bias=False)
        self.bn_1x3 = BatchNorm2d(out_channels)
        self.conv_3x3 = Conv2d(in_channels, out_channels, (3, 3), rng, bias=False)
        self.bn_3x3 = BatchNorm2d(out_channels)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"acb expects {self.in_channels} channels, got {x.shape[1]}")
        a = self.bn_3x1(self.conv_3x1(x))
        b = self.bn_1x3(self.conv_1x3(x))
        c = self.bn_3x3(self.conv_3x3(x))
        return ag.relu(a + b + c)


class SqueezeExcitation(Module):
    """Sigmoid-gated channel reweighting with a reduction-ratio bottleneck."""

    def __init__(self, channels, rng, reduction=4):
        super().__init__()
        if channels % reduction != 0:
            raise ShapeError(f"channels {channels} not divisible by reduction {reduction}")
        self.channels = channels
        self.reduction = reduction
        self.reduce = Linear(channels, channels // reduction, rng)
        self.expand = Linear(channels // reduction, channels, rng)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"se expects {self.channels} channels, got {x.shape[1]}")
        pooled = x.mean(axis=(2, 3))  # (B, C)
        gate = ag.sigmoid(self.expand(ag.relu(self.reduce(pooled))))
        return x * gate.reshape(x.shape[0], self.channels, 1, 1)


def resize_to(x, target_hw):
    """Bilinearly resample x (B,C,H,W) to target (height, width).

    Upsampling and downsampling are both supported; resizing to the
    current size returns the input unchanged.
    """
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th <= 0 or tw <= 0:
        raise ShapeError(f"target size must be positive, got {(th, tw)}")
    if isinstance(x, np.ndarray):
        return ag.resize_bilinear(ag.Tensor(x), th, tw).data
    return ag.resize_bilinear(x, th, tw)
