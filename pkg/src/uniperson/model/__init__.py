from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, desk_preset
from .network import Decoder, PerceptionModel, pad_images
from .outputs import ModelOutput, PredictionSet

__all__ = [
    "Decoder",
    "ModelConfig",
    "ModelOutput",
    "PerceptionModel",
    "PredictionSet",
    "desk_preset",
    "load_checkpoint",
    "pad_images",
    "save_checkpoint",
]
