from .base import CROSS, SELF, AttentionCapture, Backbone, InjectionDirective, LayerInfo, TextEmbedding
from .toy import ToyBackbone, ToyBackboneConfig, train_toy_backbone

__all__ = [
    "AttentionCapture",
    "Backbone",
    "CROSS",
    "InjectionDirective",
    "LayerInfo",
    "SELF",
    "TextEmbedding",
    "ToyBackbone",
    "ToyBackboneConfig",
    "train_toy_backbone",
]
