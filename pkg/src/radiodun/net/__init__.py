from .layers import ChannelAttention, ConvBlock, StageBlock, soft_threshold
from .model import (
    DRM,
    GDM,
    PMM,
    InitModule,
    ModelConfig,
    PlainFusion,
    RadioDUN,
    RadioDUNOutput,
    UnfoldingBlock,
    count_parameters,
)

__all__ = [
    "ChannelAttention", "ConvBlock", "StageBlock", "soft_threshold",
    "DRM", "GDM", "PMM", "InitModule", "ModelConfig", "PlainFusion", "RadioDUN",
    "RadioDUNOutput", "UnfoldingBlock", "count_parameters",
]
