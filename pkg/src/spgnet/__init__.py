"""Multi-stage encoder-decoder segmentation with semantic prediction guidance."""

from spgnet.attention import GuidedAttentionBundle, SPGConfig
from spgnet.backbone import EncoderSpec, PoolingStrategy
from spgnet.decoder import DecoderSpec
from spgnet.model import ForwardOutput, NetworkPlan, SPGNet, StagePlan, build

__all__ = [
    "DecoderSpec",
    "EncoderSpec",
    "ForwardOutput",
    "GuidedAttentionBundle",
    "NetworkPlan",
    "PoolingStrategy",
    "SPGConfig",
    "SPGNet",
    "StagePlan",
    "build",
]

__version__ = "0.1.0"
