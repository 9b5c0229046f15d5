"""Multi-scale deformable attention.

Each query samples a small set of learned locations around its reference
points on every feature scale, aggregates the bilinearly interpolated values
with softmax-normalized weights, and projects the result. Sampling is
differentiable w.r.t. both the feature values and the sampling locations;
out-of-range locations clamp to the border.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor


def ms_sample_attend(
    values: Tensor,
    spatial_shapes: list[tuple[int, int]],
    sampling_locations: Tensor,
    attention_weights: Tensor,
) -> Tensor:
    """Core sampling + weighting step.

    values: [B, N, n_heads, head_dim] flattened multi-level feature tokens.
    sampling_locations: [B, Q, n_heads, n_levels, n_points, 2], normalized
    (x, y) in [0, 1] (values outside clamp to the border).
    attention_weights: [B, Q, n_heads, n_levels, n_points].
    Returns [B, Q, n_heads * head_dim].
    """
    B, _, n_heads, head_dim = values.shape
    _, Q, _, n_levels, n_points, _ = sampling_locations.shape
    level_sizes = [h * w for h, w in spatial_shapes]
    value_list = values.split(level_sizes, dim=1)
    grids = 2.0 * sampling_locations - 1.0

    sampled = []
    for lvl, (h, w) in enumerate(spatial_shapes):
        # [B*heads, head_dim, H, W]
        v = (
            value_list[lvl]
            .permute(0, 2, 3, 1)
            .reshape(B * n_heads, head_dim, h, w)
        )
        g = grids[:, :, :, lvl].permute(0, 2, 1, 3, 4).reshape(B * n_heads, Q, n_points, 2)
        s = F.grid_sample(v, g, mode="bilinear", padding_mode="border", align_corners=False)
        sampled.append(s)  # [B*heads, head_dim, Q, n_points]
    # [B*heads, head_dim, Q, n_levels, n_points]
    stack = torch.stack(sampled, dim=3)
    w = attention_weights.permute(0, 2, 1, 3, 4).reshape(B * n_heads, 1, Q, n_levels, n_points)
    out = (stack * w).sum(dim=(3, 4))  # [B*heads, head_dim, Q]
    return out.reshape(B, n_heads, head_dim, Q).permute(0, 3, 1, 2).reshape(B, Q, n_heads * head_dim)


class MultiScaleDeformableAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, n_levels: int, n_points: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must divide evenly across heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_levels = n_levels
        self.n_points = n_points
        self.head_dim = d_model // n_heads

        self.sampling_offsets = nn.Linear(d_model, n_heads * n_levels * n_points * 2)
        self.attention_weights = nn.Linear(d_model, n_heads * n_levels * n_points)
        self.value_proj = nn.Linear(d_model, d_model)
        self.output_proj = nn.Linear(d_model, d_model)
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        # Spread initial offsets over directions and rings, one direction per head.
        thetas = torch.arange(self.n_heads, dtype=torch.float32) * (2 * math.pi / self.n_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], dim=-1)
        grid = grid / grid.abs().max(-1, keepdim=True).values
        grid = grid[:, None, None, :].repeat(1, self.n_levels, self.n_points, 1)
        for p in range(self.n_points):
            grid[:, :, p] *= p + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.flatten())
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def forward(
        self,
        query: Tensor,
        reference_points: Tensor,
        memory: Tensor,
        spatial_shapes: list[tuple[int, int]],
    ) -> Tensor:
        """reference_points: [B, Q, n_levels, 2] or [B, Q, n_levels, 4] (cxcywh).

        With 4D references the offsets are scaled by half the box size, so a
        query's samples track its anchor; with 2D references offsets are in
        units of one cell of each level.
        """
        B, Q, _ = query.shape
        values = self.value_proj(memory).view(B, -1, self.n_heads, self.head_dim)

        offsets = self.sampling_offsets(query).view(
            B, Q, self.n_heads, self.n_levels, self.n_points, 2
        )
        weights = self.attention_weights(query).view(
            B, Q, self.n_heads, self.n_levels * self.n_points
        )
        weights = weights.softmax(-1).view(B, Q, self.n_heads, self.n_levels, self.n_points)

        if reference_points.shape[-1] == 4:
            ref_xy = reference_points[:, :, None, :, None, :2]
            ref_wh = reference_points[:, :, None, :, None, 2:]
            locations = ref_xy + offsets / self.n_points * ref_wh * 0.5
        else:
            sizes = torch.tensor(
                [[w, h] for h, w in spatial_shapes],
                dtype=query.dtype,
                device=query.device,
            )
            ref_xy = reference_points[:, :, None, :, None, :]
            locations = ref_xy + offsets / sizes[None, None, None, :, None, :]

        out = ms_sample_attend(values, spatial_shapes, locations, weights)
        return self.output_proj(out)
