"""Entropy-gated knowledge distillation from a fully fine-tuned teacher into PEFT students."""

from .config import Config
from .diffcore import Tape, Tensor, backward
from .distill import GatePolicy, entropy_gate, kd_loss
from .encoder import DualEncoderModel, EncoderConfig
from .peft import attach, detach, trainable_parameter_count
from .synthdata import GenSpec, SplitSpec, generate, split
from .trainkit import TrainConfig, run_protocol, train_student, train_teacher

__all__ = [
    "Config",
    "DualEncoderModel",
    "EncoderConfig",
    "GatePolicy",
    "GenSpec",
    "SplitSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "attach",
    "backward",
    "detach",
    "entropy_gate",
    "generate",
    "kd_loss",
    "run_protocol",
    "split",
    "train_student",
    "train_teacher",
    "trainable_parameter_count",
]
