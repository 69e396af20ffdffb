"""Selective state-space contrastive image-text models in plain numpy."""
from .attention import AttentionEncoder, AttnConfig
from .checkpoint import Checkpoint
from .cost import CostReport, flops_memory
from .estimator import SsmClipEstimator
from .experiments import ShuffleConfig, resolution_sweep, shuffle_experiment
from .metrics import geometry, retrieval_recall, zero_shot_classify
from .ssm import MambaBlock, scan_chunked, scan_recurrent
from .tensor import Tensor
from .text import TextConfig, TextEncoder, TokenBatch, Vocab
from .train import SsmClipModel, TrainConfig, train_loop
from .vision import VisionConfig, VisionEncoder

__version__ = "0.1.0"

__all__ = [
    "AttentionEncoder", "AttnConfig", "Checkpoint", "SsmClipEstimator", "SsmClipModel", "CostReport",
    "MambaBlock", "ShuffleConfig", "Tensor", "TextConfig", "TextEncoder", "TokenBatch", "TrainConfig",
    "VisionConfig", "VisionEncoder", "Vocab", "flops_memory", "geometry", "resolution_sweep",
    "retrieval_recall", "scan_chunked", "scan_recurrent", "shuffle_experiment", "train_loop",
    "zero_shot_classify",
]
