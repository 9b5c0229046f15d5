"""Small shared building blocks: MLPs, sine embeddings, logit-space helpers."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
from torch import Tensor


class MLP(nn.Module):
    """Stack of linear+ReLU layers with a linear output layer."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(num_layers)
        )

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = torch.relu(x)
        return x


def inverse_sigmoid(x: Tensor, eps: float = 1e-6) -> Tensor:
    x = x.clamp(min=eps, max=1 - eps)
    return torch.log(x / (1 - x))


def _sine_embed_1d(x: Tensor, num_feats: int, temperature: float = 10000.0) -> Tensor:
    """[...,] -> [..., num_feats] interleaved sin/cos embedding of a coordinate."""
    dim_t = torch.arange(num_feats // 2, dtype=x.dtype, device=x.device)
    dim_t = temperature ** (2 * dim_t / num_feats)
    pos = x[..., None] * 2 * math.pi / dim_t
    return torch.stack((pos.sin(), pos.cos()), dim=-1).flatten(-2)


def sine_position_encoding(height: int, width: int, dim: int, device=None) -> Tensor:
    """[H*W, dim] sine embedding of pixel centers in normalized coordinates."""
    ys = (torch.arange(height, dtype=torch.float32, device=device) + 0.5) / height
    xs = (torch.arange(width, dtype=torch.float32, device=device) + 0.5) / width
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    emb_y = _sine_embed_1d(gy.flatten(), dim // 2)
    emb_x = _sine_embed_1d(gx.flatten(), dim // 2)
    return torch.cat([emb_y, emb_x], dim=-1)


def anchor_sine_embedding(anchors: Tensor, dim: int) -> Tensor:
    """[..., 4] cxcywh -> [..., 2*dim] sine features (dim/2 per coordinate)."""
    feats = [_sine_embed_1d(anchors[..., i], dim // 2) for i in range(4)]
    return torch.cat(feats, dim=-1)


class AnchorPositionEncoder(nn.Module):
    """Maps a 4D anchor box to a query positional embedding."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.proj = MLP(2 * dim, dim, dim, 2)

    def forward(self, anchors: Tensor) -> Tensor:
        return self.proj(anchor_sine_embedding(anchors, self.dim))
