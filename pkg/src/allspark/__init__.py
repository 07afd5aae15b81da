"""AllSpark-style semi-supervised segmentation on a numpy autodiff core.

Channel-wise cross-attention over a class-wise FIFO semantic memory, filled by
channel-wise semantic grouping, trained with naive pseudo-labeling.
"""
from . import tensor
from .attention import AttentionParams, FeatureMap, Origin, allspark_forward, channel_cross_attention, channel_self_attention
from .errors import AllSparkError, ConfigError, ContractError, FormatError, NumericError, ShapeError, StateError, UndefinedMetricError
from .memory import ChannelAssignment, ProbabilityToken, SemanticMemory, channel_class_similarity, csg_update, group_channels
from .metrics import ConfusionMatrix, miou
from .model import ModelConfig, Prediction, SegModel
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, evaluate, fit, poly_lr, pseudo_label, total_loss

__version__ = "0.1.0"

__all__ = [
    "tensor",
    "AttentionParams",
    "FeatureMap",
    "Origin",
    "allspark_forward",
    "channel_cross_attention",
    "channel_self_attention",
    "AllSparkError",
    "ConfigError",
    "ContractError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "StateError",
    "UndefinedMetricError",
    "ChannelAssignment",
    "ProbabilityToken",
    "SemanticMemory",
    "channel_class_similarity",
    "csg_update",
    "group_channels",
    "ConfusionMatrix",
    "miou",
    "ModelConfig",
    "Prediction",
    "SegModel",
    "Tensor",
    "backward",
    "no_grad",
    "TrainConfig",
    "evaluate",
    "fit",
    "poly_lr",
    "pseudo_label",
    "total_loss",
]
