"""Lightweight binary segmentation network trained with decoder
consistency, implemented in NumPy with selectable Numba kernels.

The model pairs a partial decoder (full-scale skip connections over the
three deepest encoder levels only) with a ~150-parameter attention-style
auxiliary decoder used purely at training time; a dice-style agreement
loss between the two predictions regularizes the shared encoder.
"""

__version__ = "0.1.0"

from . import autograd, kernels  # noqa: F401
from .backbone import BackboneConfig, FeaturePyramid, ReducedPyramid, extract_features, reduce_channels  # noqa: F401
from .blocks import AsymmetricConvBlock, SqueezeExcitation, resize_to  # noqa: F401
from .data import (  # noqa: F401
    AugmentationConfig,
    Sample,
    SplitSpec,
    augment,
    generate_synthetic,
    load_corpus,
    preprocess,
    split_corpus,
)
from .decoders import (  # noqa: F401
    AUX_PARAM_BUDGET,
    PUBLISHED_PARAM_COUNT,
    DecoderState,
    ModelConfig,
    PlutoNet,
    count_parameters,
    model_forward,
)
from .losses import LossBundle, LossConfig, consistency_loss, dice_pair_loss, supervised_loss, total_loss  # noqa: F401
from .metrics import ConfusionCounts, MetricsReport, confusion, dice, evaluate, iou, precision, recall  # noqa: F401
from .trainer import (  # noqa: F401
    TrainConfig,
    TrainHistory,
    early_stop_check,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)
