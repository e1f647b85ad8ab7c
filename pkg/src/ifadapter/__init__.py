"""Desk-scale instance feature adapter for layout-to-image diffusion.

The adapter turns each instance's (box, description) pair into fixed-length
tokens, attends from latent cells to those tokens inside the instance's box,
blends overlapping instances with learned area-gated weights, and adds the
result to a frozen base model's cross-attention through a zero-initialized
tanh gate.
"""
__version__ = "0.1.0"

from .adapter import AdapterConfig, IFAdapter, area_gates, fuse, inject, instance_semantic_map
from .data import SceneConfig, gen_scene, make_sample, render, verify
from .diffusion import ModelConfig, NoiseSchedule, SampleConfig, ToyLDM, TrainConfig, train
from .layout import BBox, InstanceDescriptor, LayoutSpec, ValidationError, rasterize
from .metrics import average_precision, evaluate, frechet_distance, iou, match_detections
from .text_encoder import TextEncoderConfig, ToyTextEncoder

__all__ = [
    "AdapterConfig", "IFAdapter", "area_gates", "fuse", "inject", "instance_semantic_map",
    "SceneConfig", "gen_scene", "make_sample", "render", "verify",
    "ModelConfig", "NoiseSchedule", "SampleConfig", "ToyLDM", "TrainConfig", "train",
    "BBox", "InstanceDescriptor", "LayoutSpec", "ValidationError", "rasterize",
    "average_precision", "evaluate", "frechet_distance", "iou", "match_detections",
    "TextEncoderConfig", "ToyTextEncoder",
]
