"""The full perception network.

Backbone features feed a deformable-attention encoder; top-scoring encoder
proposals donate initial anchor boxes (content queries stay learned); a
task-shared decoder refines every query across layers; small per-layer heads
read class, box, keypoints, mask, gender, age and body-model parameters off
the same refined query.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from ..matching import DenoisingGroup
from .backbone import build_backbone, validate_feature_contract
from .config import ModelConfig
from .deform_attn import MultiScaleDeformableAttention
from .layers import MLP, AnchorPositionEncoder, inverse_sigmoid, sine_position_encoding
from .outputs import ModelOutput, PredictionSet

DEFAULT_ANCHOR = (0.5, 0.5, 0.1, 0.1)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.attn = MultiScaleDeformableAttention(
            d, cfg.num_heads, cfg.num_feature_levels, cfg.num_sampling_points
        )
        self.norm1 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, d * cfg.ffn_ratio), nn.ReLU(), nn.Linear(d * cfg.ffn_ratio, d)
        )
        self.norm2 = nn.LayerNorm(d)

    def forward(self, tokens, pos, ref_points, shapes):
        q = tokens + pos
        tokens = self.norm1(tokens + self.attn(q, ref_points, tokens, shapes))
        tokens = self.norm2(tokens + self.ffn(tokens))
        return tokens


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))

    def forward(self, tokens, pos, shapes):
        ref = token_reference_points(shapes, tokens.dtype, tokens.device)
        ref = ref[None, :, None, :].expand(tokens.shape[0], -1, len(shapes), -1)
        for layer in self.layers:
            tokens = layer(tokens, pos, ref, shapes)
        return tokens


def token_reference_points(shapes, dtype, device) -> Tensor:
    """Normalized (x, y) centers of every token across all levels, [N, 2]."""
    pts = []
    for h, w in shapes:
        ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h
        xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        pts.append(torch.stack([gx.flatten(), gy.flatten()], dim=-1))
    return torch.cat(pts, dim=0)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.self_attn = nn.MultiheadAttention(d, cfg.num_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.cross_attn = MultiScaleDeformableAttention(
            d, cfg.num_heads, cfg.num_feature_levels, cfg.num_sampling_points
        )
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, d * cfg.ffn_ratio), nn.ReLU(), nn.Linear(d * cfg.ffn_ratio, d)
        )
        self.norm3 = nn.LayerNorm(d)

    def forward(self, content, query_pos, anchors, memory, shapes, attn_mask):
        q = k = content + query_pos
        sa, _ = self.self_attn(q, k, content, attn_mask=attn_mask, need_weights=False)
        content = self.norm1(content + sa)
        ref = anchors[:, :, None, :].expand(-1, -1, len(shapes), -1)
        ca = self.cross_attn(content + query_pos, ref, memory, shapes)
        content = self.norm2(content + ca)
        content = self.norm3(content + self.ffn(content))
        return content


class Decoder(nn.Module):
    """Task-shared decoder with per-layer anchor refinement.

    Anchor updates run in logit space; the box prediction of layer i is built
    on the un-detached refinement of layer i-1 so its gradient reaches one
    extra layer back, while the anchors fed forward are detached.
    """

    def __init__(self, cfg: ModelConfig, box_heads: list[nn.Module]):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        if len(box_heads) != len(self.layers):
            raise ValueError("need one box head per decoder layer")
        self.box_heads = box_heads  # owned by the per-layer task heads
        self.query_pos = AnchorPositionEncoder(cfg.hidden_dim)
        self.final_norm = nn.LayerNorm(cfg.hidden_dim)

    def forward(self, content, anchors, memory, shapes, attn_mask=None):
        """Returns per-layer (normed content, refined boxes) lists.

        With zero layers the inputs are returned unchanged (degenerate
        configuration used by contract tests).
        """
        if not self.layers:
            return [self.final_norm(content)], [anchors]
        contents, boxes = [], []
        ref = anchors.detach()
        prev_undetached = anchors
        for layer, box_head in zip(self.layers, self.box_heads):
            qpos = self.query_pos(ref)
            content = layer(content, qpos, ref, memory, shapes, attn_mask)
            delta = box_head(self.final_norm(content))
            new_box = torch.sigmoid(delta + inverse_sigmoid(prev_undetached))
            _assert_valid_boxes(new_box)
            contents.append(self.final_norm(content))
            boxes.append(new_box)
            prev_undetached = new_box
            ref = new_box.detach()
        return contents, boxes


def _assert_valid_boxes(boxes: Tensor):
    if not bool(torch.isfinite(boxes).all()) or not bool((boxes[..., 2:] > 0).all()):
        raise FloatingPointError("anchor refinement produced an invalid box")


class TaskHeads(nn.Module):
    """Lightweight per-layer readouts of one refined query."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.cls = nn.Linear(d, 1)
        self.box = MLP(d, d, 4, 3)
        if cfg.with_keypoints:
            self.kpt_offsets = MLP(d, d, cfg.num_keypoints * 2, 3)
            self.kpt_conf = nn.Linear(d, 1)
        if cfg.with_segmentation:
            self.mask_query = MLP(d, d, d, 3)
        if cfg.with_attributes:
            self.gender = MLP(d, d, 2, 2)
            self.age = MLP(d, d, cfg.num_age_classes, 2)
        if cfg.with_mesh:
            self.pose = MLP(d, d, cfg.num_body_joints * 3, 3)
            self.shape = MLP(d, d, cfg.num_shape_params, 3)

        prior = cfg.class_prior_prob
        bias = -float(torch.log(torch.tensor((1 - prior) / prior)))
        nn.init.constant_(self.cls.bias, bias)
        nn.init.constant_(self.box.layers[-1].weight, 0.0)
        nn.init.constant_(self.box.layers[-1].bias, 0.0)
        if cfg.with_keypoints:
            nn.init.constant_(self.kpt_offsets.layers[-1].weight, 0.0)
            nn.init.constant_(self.kpt_offsets.layers[-1].bias, 0.0)


class JointRefiner(nn.Module):
    """Refines keypoints by cross-attending the encoder memory per joint."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.num_layers = cfg.joint_refine_layers
        self.joint_embed = nn.Embedding(cfg.num_keypoints, d)
        self.attns = nn.ModuleList(
            MultiScaleDeformableAttention(
                d, cfg.num_heads, cfg.num_feature_levels, cfg.num_sampling_points
            )
            for _ in range(self.num_layers)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(self.num_layers))
        self.deltas = nn.ModuleList(MLP(d, d, 2, 2) for _ in range(self.num_layers))
        for m in self.deltas:
            nn.init.constant_(m.layers[-1].weight, 0.0)
            nn.init.constant_(m.layers[-1].bias, 0.0)

    def forward(self, content, keypoints, memory, shapes):
        """content [B, Q, d], keypoints [B, Q, K, 2] -> refined keypoints."""
        if self.num_layers == 0:
            return keypoints
        B, Q, K, _ = keypoints.shape
        joints = content[:, :, None, :] + self.joint_embed.weight[None, None, :, :]
        joints = joints.reshape(B, Q * K, -1)
        kpts = keypoints
        for attn, norm, delta in zip(self.attns, self.norms, self.deltas):
            ref = kpts.reshape(B, Q * K, 1, 2).expand(-1, -1, len(shapes), -1)
            joints = norm(joints + attn(joints, ref, memory, shapes))
            kpts = kpts + delta(joints).reshape(B, Q, K, 2)
        return kpts


class PixelEmbedding(nn.Module):
    """High-resolution pixel embedding map from backbone and encoder features."""

    def __init__(self, cfg: ModelConfig, backbone_channels: tuple[int, ...]):
        super().__init__()
        d = cfg.hidden_dim
        self.proj_c1 = nn.Conv2d(backbone_channels[0], d, 1)
        self.fuse = nn.Sequential(
            nn.Conv2d(d, d, 3, padding=1), nn.GroupNorm(8, d), nn.ReLU(), nn.Conv2d(d, d, 1)
        )

    def forward(self, c1: Tensor, enc_map: Tensor) -> Tensor:
        up = F.interpolate(enc_map, size=c1.shape[-2:], mode="bilinear", align_corners=False)
        return self.fuse(self.proj_c1(c1) + up)


class PerceptionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.backbone = build_backbone(cfg.backbone)
        chans = tuple(self.backbone.out_channels)

        # Encoder scales are strides 8..; an extra stride doubling comes from c4.
        self.input_proj = nn.ModuleList()
        enc_sources = [chans[1], chans[2], chans[3]]
        for c in enc_sources[: cfg.num_feature_levels]:
            self.input_proj.append(
                nn.Sequential(nn.Conv2d(c, d, 1), nn.GroupNorm(8, d))
            )
        self.extra_proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(chans[3] if i == 0 else d, d, 3, stride=2, padding=1), nn.GroupNorm(8, d))
            for i in range(max(0, cfg.num_feature_levels - 3))
        )
        self.level_embed = nn.Parameter(torch.zeros(cfg.num_feature_levels, d))
        nn.init.normal_(self.level_embed)

        self.encoder = Encoder(cfg)
        self.enc_cls = nn.Linear(d, 1)
        self.enc_box = MLP(d, d, 4, 3)
        prior = cfg.class_prior_prob
        nn.init.constant_(
            self.enc_cls.bias, -float(torch.log(torch.tensor((1 - prior) / prior)))
        )
        nn.init.constant_(self.enc_box.layers[-1].weight, 0.0)
        nn.init.constant_(self.enc_box.layers[-1].bias, 0.0)

        self.query_embed = nn.Embedding(cfg.num_queries, d)
        self.dn_label_embed = nn.Embedding(3, d)

        self.heads = nn.ModuleList(TaskHeads(cfg) for _ in range(cfg.decoder_layers))
        self.decoder = Decoder(cfg, [h.box for h in self.heads])
        if cfg.with_keypoints:
            self.joint_refiner = JointRefiner(cfg)
            self.heatmap_head = nn.Sequential(
                nn.Conv2d(d, d, 3, padding=1), nn.GroupNorm(8, d), nn.ReLU(),
                nn.Conv2d(d, cfg.num_keypoints, 1),
            )
        if cfg.with_segmentation:
            self.pixel_embed = PixelEmbedding(cfg, chans)

    # ---- feature preparation -------------------------------------------------

    def _encoder_features(self, images: Tensor):
        feats = self.backbone(images)
        validate_feature_contract(feats, self.backbone, images.shape[-2:])
        maps = []
        sources = [feats[1], feats[2], feats[3]]
        for proj, f in zip(self.input_proj, sources):
            maps.append(proj(f))
        x = feats[3]
        for proj in self.extra_proj:
            x = proj(x)
            maps.append(x)
        maps = maps[: self.cfg.num_feature_levels]
        shapes = [(m.shape[-2], m.shape[-1]) for m in maps]
        tokens = torch.cat([m.flatten(2).transpose(1, 2) for m in maps], dim=1)
        pos = torch.cat(
            [
                sine_position_encoding(h, w, self.cfg.hidden_dim, images.device)
                + self.level_embed[i]
                for i, (h, w) in enumerate(shapes)
            ],
            dim=0,
        )[None]
        return feats, maps, tokens, pos, shapes

    def _encoder_proposals(self, memory: Tensor, shapes) -> tuple[Tensor, Tensor]:
        ref = token_reference_points(shapes, memory.dtype, memory.device)
        sizes = []
        for lvl, (h, w) in enumerate(shapes):
            sizes.append(torch.full((h * w, 2), 0.05 * 2**lvl, dtype=memory.dtype, device=memory.device))
        base = torch.cat([ref, torch.cat(sizes, dim=0)], dim=-1)[None]
        scores = self.enc_cls(memory).squeeze(-1)
        boxes = torch.sigmoid(self.enc_box(memory) + inverse_sigmoid(base))
        return scores, boxes

    def _select_anchors(self, scores: Tensor, boxes: Tensor) -> Tensor:
        """Top-scoring proposals donate anchors; ties break by token index."""
        B, N = scores.shape
        n_q = self.cfg.num_queries
        order = torch.argsort(-scores, dim=1, stable=True)
        take = order[:, : min(n_q, N)]
        anchors = torch.gather(boxes, 1, take[..., None].expand(-1, -1, 4))
        if N < n_q:
            pad = boxes.new_tensor(DEFAULT_ANCHOR).expand(B, n_q - N, 4)
            anchors = torch.cat([anchors, pad], dim=1)
        return anchors

    # ---- full forward ----------------------------------------------------------

    def forward(
        self,
        images: Tensor,
        dn_groups: list[DenoisingGroup] | None = None,
        train: bool = False,
    ) -> ModelOutput:
        cfg = self.cfg
        feats, maps, tokens, pos, shapes = self._encoder_features(images)
        memory = self.encoder(tokens, pos, shapes)

        enc_scores, enc_boxes = self._encoder_proposals(memory, shapes)
        encoder_set = PredictionSet(class_logits=enc_scores, boxes=enc_boxes)
        anchors = self._select_anchors(enc_scores, enc_boxes).detach()

        B = images.shape[0]
        content = self.query_embed.weight[None].expand(B, -1, -1)
        n_dn = 0
        attn_mask = None
        if dn_groups is not None and dn_groups[0].num_queries > 0:
            n_dn = dn_groups[0].num_queries
            dn_content = torch.stack([self.dn_label_embed(g.label_ids) for g in dn_groups])
            dn_anchors = torch.stack([g.anchors for g in dn_groups]).to(anchors.dtype)
            content = torch.cat([dn_content, content], dim=1)
            anchors = torch.cat([dn_anchors, anchors], dim=1)
            attn_mask = dn_groups[0].attn_mask

        contents, boxes = self.decoder(content, anchors, memory, shapes, attn_mask)

        pixel_map = None
        if cfg.with_segmentation:
            pixel_map = self.pixel_embed(feats[0], maps[0])

        layer_sets: list[PredictionSet] = []
        dn_sets: list[PredictionSet] = []
        for li, (c, b) in enumerate(zip(contents, boxes)):
            heads = self.heads[min(li, len(self.heads) - 1)]
            mc, mb = c[:, n_dn:], b[:, n_dn:]
            out = PredictionSet(class_logits=heads.cls(mc).squeeze(-1), boxes=mb)
            if cfg.with_keypoints:
                offsets = heads.kpt_offsets(mc).reshape(B, -1, cfg.num_keypoints, 2)
                kpts = mb[:, :, None, :2].detach() + offsets
                kpts = self.joint_refiner(mc, kpts, memory, shapes)
                out.keypoints = kpts
                out.kpt_logits = heads.kpt_conf(mc).squeeze(-1)
            if cfg.with_segmentation:
                q = heads.mask_query(mc)
                out.mask_logits = torch.einsum("bqd,bdhw->bqhw", q, pixel_map)
            if cfg.with_attributes:
                out.gender_logits = heads.gender(mc)
                out.age_logits = heads.age(mc)
            if cfg.with_mesh:
                out.pose_params = heads.pose(mc)
                out.shape_params = heads.shape(mc)
            layer_sets.append(out)
            if n_dn:
                dn_sets.append(
                    PredictionSet(class_logits=heads.cls(c[:, :n_dn]).squeeze(-1), boxes=b[:, :n_dn])
                )

        heatmaps = None
        if train and cfg.with_keypoints:
            h0, w0 = shapes[0]
            enc_map0 = memory[:, : h0 * w0].transpose(1, 2).reshape(B, -1, h0, w0)
            heatmaps = self.heatmap_head(enc_map0)

        return ModelOutput(
            layers=layer_sets,
            encoder=encoder_set,
            embeddings=contents[-1][:, n_dn:],
            anchors=boxes[-1][:, n_dn:].detach(),
            dn_layers=dn_sets or None,
            heatmaps=heatmaps,
        )


def pad_images(images: list[Tensor], multiple: int = 32) -> tuple[Tensor, list[tuple[int, int]]]:
    """Stack variable-size [3, H, W] images into one zero-padded batch.

    Returns the batch and the original (H, W) per image; normalized
    predictions on the padded canvas map back to image i's frame by scaling
    with (W_pad / W_i, H_pad / H_i).
    """
    hs = [im.shape[-2] for im in images]
    ws = [im.shape[-1] for im in images]
    H = -(-max(hs) // multiple) * multiple
    W = -(-max(ws) // multiple) * multiple
    batch = images[0].new_zeros(len(images), 3, H, W)
    for i, im in enumerate(images):
        batch[i, :, : im.shape[-2], : im.shape[-1]] = im
    return batch, list(zip(hs, ws))
