"""Prediction containers emitted by the network."""

from __future__ import annotations

from dataclasses import dataclass, fields

from torch import Tensor


@dataclass
class PredictionSet:
    """Per-query head outputs for a batch at one decoder (or encoder) layer.

    Boxes are cxcywh, normalized to the padded input canvas. Fields of
    disabled tasks are None. ``keypoints`` are absolute normalized
    coordinates (reference points + regressed offsets).
    """

    class_logits: Tensor  # [B, Q]
    boxes: Tensor  # [B, Q, 4]
    keypoints: Tensor | None = None  # [B, Q, K, 2]
    kpt_logits: Tensor | None = None  # [B, Q]
    mask_logits: Tensor | None = None  # [B, Q, Hm, Wm]
    gender_logits: Tensor | None = None  # [B, Q, 2]
    age_logits: Tensor | None = None  # [B, Q, A]
    pose_params: Tensor | None = None  # [B, Q, 3*J]
    shape_params: Tensor | None = None  # [B, Q, 10]

    def image(self, i: int) -> dict:
        """Single-image view as the dict consumed by matching."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = None if v is None else v[i]
        return out

    @property
    def batch_size(self) -> int:
        return int(self.class_logits.shape[0])

    @property
    def num_queries(self) -> int:
        return int(self.class_logits.shape[1])


@dataclass
class ModelOutput:
    layers: list[PredictionSet]  # matching queries, one set per decoder layer
    encoder: PredictionSet  # encoder proposal set (detection fields only)
    embeddings: Tensor  # [B, Q, d] final-layer refined content queries
    anchors: Tensor  # [B, Q, 4] final refined anchors
    dn_layers: list[PredictionSet] | None = None  # denoising slice, det fields only
    heatmaps: Tensor | None = None  # [B, K, Hh, Wh] auxiliary branch (train only)

    @property
    def final(self) -> PredictionSet:
        return self.layers[-1]
