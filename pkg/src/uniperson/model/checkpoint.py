"""Self-describing model checkpoints: named parameter arrays plus the config."""

from __future__ import annotations

import torch

from .config import ModelConfig
from .network import PerceptionModel

CHECKPOINT_FORMAT = "uniperson-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: PerceptionModel, path, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.as_dict(),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[PerceptionModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict(payload["config"])
    model = PerceptionModel(cfg)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload["extra"]
