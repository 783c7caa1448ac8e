"""Instrument playing technique detection over a pluggable frame-level
audio encoder: multi-task heads, onset-gated event decoding, and
frame-/event-level evaluation."""

from .dataset import ClassMap, FrameGrid, IPTEvent, Sample, SplitPlan
from .encoder import LayerStack, LayerWeights, StubEncoder, weighted_sum
from .losses import LossWeights
from .metrics import EvalReport
from .model import DetectionModel, PosteriorSet, build_model
from .postprocess import DecodeConfig, decode_events
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ClassMap",
    "DecodeConfig",
    "DetectionModel",
    "EvalReport",
    "FrameGrid",
    "IPTEvent",
    "LayerStack",
    "LayerWeights",
    "LossWeights",
    "PosteriorSet",
    "Sample",
    "SplitPlan",
    "StubEncoder",
    "TrainConfig",
    "build_model",
    "decode_events",
    "train",
    "weighted_sum",
]
