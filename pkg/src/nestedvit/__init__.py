"""Nested progressive-inference Vision Transformer with token recycling."""

from .config import ModelConfig, RunConfig, StageSpec, TrainConfig
from .inference import HaltPolicy, RoutingReport, infer_progressive, sweep
from .model import NestedViT, StageOutput, count_params
from .recycling import FusionConfig, fuse, make_transition, make_transitions
from .tensor import Tensor

__version__ = "0.1.0"
