"""Sparse-prior information-bottleneck rationale extraction on a small numpy autodiff core."""

from .data import Document, SynthSpec, Vocab, generate, load_jsonl, save_jsonl
from .metrics import MetricsReport, ToyJoint, ib_verify
from .model import ModelConfig, RationaleModel, infer_mask, sample_mask
from .objectives import ObjectiveConfig
from .rng import Rng
from .training import TrainConfig, build_model, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Document", "SynthSpec", "Vocab", "generate", "load_jsonl", "save_jsonl",
    "MetricsReport", "ToyJoint", "ib_verify",
    "ModelConfig", "RationaleModel", "infer_mask", "sample_mask",
    "ObjectiveConfig", "Rng", "TrainConfig", "build_model", "evaluate", "train",
]
