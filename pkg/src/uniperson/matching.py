"""Query-to-instance bipartite matching and denoising query construction.

The matching cost sums class, box, keypoint and mask terms so that one query
owns one person consistently across every task head. Denoising groups add
jittered copies of the ground truth (positives reconstruct, negatives learn to
reject) that are isolated from the matching queries by an attention mask.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from . import geom


@dataclass
class MatchWeights:
    """Per-component multipliers of the matching cost (loss-table defaults)."""

    cls: float = 1.0
    box_l1: float = 5.0
    giou: float = 2.0
    kpt_l1: float = 50.0
    kpt_oks: float = 1.5
    mask_bce: float = 8.0
    mask_dice: float = 5.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    mask_points: int = 128

    def detection_only(self) -> "MatchWeights":
        """The ablation variant that matches on class+box terms alone."""
        return replace(self, kpt_l1=0.0, kpt_oks=0.0, mask_bce=0.0, mask_dice=0.0)


@dataclass
class CostMatrix:
    """Total matching cost with its per-component breakdown retained."""

    total: Tensor  # [n_queries, n_gt]
    components: dict[str, Tensor]

    def validate(self, tol: float = 1e-9):
        for name, c in self.components.items():
            if not bool(torch.isfinite(c).all()):
                raise FloatingPointError(f"non-finite matching cost component {name!r}")
        if self.components:
            s = sum(self.components.values())
            if not bool((s - self.total).abs().max() <= tol * (1 + self.total.abs().max())):
                raise FloatingPointError("cost components do not sum to total")


@dataclass
class Assignment:
    query_indices: np.ndarray
    gt_indices: np.ndarray
    total_cost: float

    def __len__(self) -> int:
        return len(self.query_indices)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.query_indices.tolist(), self.gt_indices.tolist()))


def _focal_class_cost(logits: Tensor, alpha: float, gamma: float) -> Tensor:
    """Focal-consistent cost of declaring each query a person (vs background)."""
    p = torch.sigmoid(logits)
    log_p = -F.softplus(-logits)
    log_q = -F.softplus(logits)
    pos = alpha * ((1 - p) ** gamma) * (-log_p)
    neg = (1 - alpha) * (p**gamma) * (-log_q)
    return pos - neg


def build_cost_matrix(
    preds: dict,
    targets: dict,
    w: MatchWeights,
    point_generator: torch.Generator | None = None,
) -> CostMatrix:
    """Pairwise matching cost between per-image predictions and annotations.

    ``preds``: class_logits [Q], boxes [Q, 4] cxcywh, optional keypoints
    [Q, K, 2] and mask_logits [Q, Hm, Wm].
    ``targets``: boxes [G, 4], optional keypoints [G, K, 3], masks [G, Hm, Wm],
    areas [G] (OKS normalization), has_keypoints / has_mask [G] flags.
    Tasks that a ground-truth instance does not carry contribute zero cost in
    its column. Mask terms are evaluated on a fixed random pixel subsample to
    bound the cost of large grids.
    """
    logits = preds["class_logits"]
    boxes = preds["boxes"]
    Q = boxes.shape[0]
    gt_boxes = targets["boxes"]
    G = gt_boxes.shape[0]
    if G == 0:
        empty = boxes.new_zeros((Q, 0))
        return CostMatrix(total=empty, components={})

    comps: dict[str, Tensor] = {}
    comps["cls"] = w.cls * _focal_class_cost(logits, w.focal_alpha, w.focal_gamma)[:, None].expand(Q, G)

    comps["box_l1"] = w.box_l1 * torch.cdist(boxes, gt_boxes, p=1)
    pred_xyxy = geom.box_cxcywh_to_xyxy(boxes, validate=False)
    gt_xyxy = geom.box_cxcywh_to_xyxy(gt_boxes)
    _, g = geom.pairwise_iou_giou(pred_xyxy, gt_xyxy)
    comps["giou"] = w.giou * (1.0 - g)

    if (w.kpt_l1 or w.kpt_oks) and preds.get("keypoints") is not None and "keypoints" in targets:
        gk = targets["keypoints"]  # [G, K, 3]
        vis = (gk[:, :, 2] >= 1) & targets["has_keypoints"][:, None]
        counts = vis.sum(-1).clamp(min=1)
        pk = preds["keypoints"][:, :, :2]
        diff = (pk[:, None] - gk[None, :, :, :2]).abs().sum(-1)  # [Q, G, K], |dx|+|dy|
        l1 = (diff * vis[None]).sum(-1) / (2.0 * counts[None])  # mean |coord delta|
        oks = geom.pairwise_oks(pk, gk[:, :, :2], vis.to(pk.dtype), targets["areas"])
        col = targets["has_keypoints"].to(pk.dtype)[None, :]
        comps["kpt_l1"] = w.kpt_l1 * l1 * col
        comps["kpt_oks"] = w.kpt_oks * (1.0 - oks) * col

    if (w.mask_bce or w.mask_dice) and preds.get("mask_logits") is not None and "masks" in targets:
        ml = preds["mask_logits"].flatten(1)  # [Q, HW]
        gm = targets["masks"].flatten(1).to(ml.dtype)  # [G, HW]
        n_pix = ml.shape[1]
        n_pts = min(w.mask_points, n_pix)
        if point_generator is None:
            point_generator = torch.Generator().manual_seed(0)
        idx = torch.randperm(n_pix, generator=point_generator)[:n_pts]
        x = ml[:, idx]
        gmask = gm[:, idx]
        bce = (F.softplus(-x) @ gmask.T + F.softplus(x) @ (1 - gmask).T) / n_pts
        p = torch.sigmoid(x)
        inter = 2.0 * (p @ gmask.T)
        denom = p.sum(-1)[:, None] + gmask.sum(-1)[None, :]
        dice = 1.0 - (inter + 1.0) / (denom + 1.0)
        col = targets["has_mask"].to(ml.dtype)[None, :]
        comps["mask_bce"] = w.mask_bce * bce * col
        comps["mask_dice"] = w.mask_dice * dice * col

    total = sum(comps.values())
    cm = CostMatrix(total=total, components=comps)
    cm.validate()
    return cm


def hungarian_solve(cost) -> Assignment:
    """Globally minimal-cost assignment of a rectangular cost matrix."""
    if isinstance(cost, CostMatrix):
        cost = cost.total
    if torch.is_tensor(cost):
        cost = cost.detach().cpu().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = linear_sum_assignment(cost)
    a = Assignment(rows, cols, float(cost[rows, cols].sum()))
    n = min(cost.shape)
    assert len(a) == n and len(set(rows.tolist())) == n and len(set(cols.tolist())) == n
    return a


@dataclass
class CdnConfig:
    groups: int = 100
    box_noise_scale: float = 0.4
    neg_noise_scale_max: float = 1.0
    label_flip_rate: float = 0.5


# Content-embedding ids for denoising queries.
DN_LABEL_FLIPPED = 0
DN_LABEL_HUMAN = 1
DN_LABEL_PAD = 2


@dataclass
class DenoisingGroup:
    """Noised ground-truth queries plus the mask isolating them.

    Slots are laid out group by group, each group holding ``pad_gt`` positives
    followed by ``pad_gt`` negatives. ``attn_mask`` covers denoising plus
    matching queries (True blocks attention): groups cannot see each other and
    denoising and matching queries are mutually invisible.
    """

    anchors: Tensor  # [n_dn, 4] cxcywh
    label_ids: Tensor  # [n_dn] int64
    target_gt: Tensor  # [n_dn] int64, -1 for padding
    is_positive: Tensor  # [n_dn] bool
    valid: Tensor  # [n_dn] bool
    groups: int
    pad_gt: int
    attn_mask: Tensor  # [n_dn + n_q, n_dn + n_q] bool

    @property
    def num_queries(self) -> int:
        return int(self.anchors.shape[0])


def _jitter_boxes(boxes: Tensor, magnitude: Tensor) -> Tensor:
    """Shift centers by up to magnitude*wh/2 and rescale sizes by 1 +/- magnitude."""
    cx, cy, bw, bh = boxes.unbind(-1)
    mc_x, mc_y, mw, mh = magnitude.unbind(-1)
    cx = (cx + mc_x * bw / 2).clamp(0.0, 1.0)
    cy = (cy + mc_y * bh / 2).clamp(0.0, 1.0)
    bw = (bw * (1 + mw)).clamp(1e-3, 1.0)
    bh = (bh * (1 + mh)).clamp(1e-3, 1.0)
    return torch.stack([cx, cy, bw, bh], dim=-1)


def cdn_build(
    gt_boxes: Tensor,
    n_queries: int,
    cfg: CdnConfig,
    generator: torch.Generator | None = None,
    pad_gt: int | None = None,
) -> DenoisingGroup:
    """Build the denoising query set for one image.

    Positives jitter each ground-truth box by at most ``box_noise_scale`` and
    reconstruct it; negatives use noise drawn from (box_noise_scale,
    neg_noise_scale_max] and are supervised as background. ``pad_gt`` pads the
    per-group slot count (for batching images with different instance counts);
    padded slots are marked invalid and never supervised. With zero ground
    truths the group is empty and contributes no loss.
    """
    device = gt_boxes.device
    G = cfg.groups
    n_gt = int(gt_boxes.shape[0])
    pad = n_gt if pad_gt is None else pad_gt
    if pad < n_gt:
        raise ValueError("pad_gt smaller than the instance count")
    n_dn = 2 * G * pad if n_gt > 0 else 0
    size = n_dn + n_queries

    attn_mask = torch.zeros(size, size, dtype=torch.bool, device=device)
    if n_dn:
        attn_mask[n_dn:, :n_dn] = True
        attn_mask[:n_dn, n_dn:] = True
        for g in range(G):
            lo, hi = g * 2 * pad, (g + 1) * 2 * pad
            attn_mask[lo:hi, :lo] = True
            attn_mask[lo:hi, hi:n_dn] = True

    if n_dn == 0:
        f = gt_boxes.new_zeros
        return DenoisingGroup(
            anchors=f((0, 4)),
            label_ids=torch.zeros(0, dtype=torch.int64, device=device),
            target_gt=torch.zeros(0, dtype=torch.int64, device=device),
            is_positive=torch.zeros(0, dtype=torch.bool, device=device),
            valid=torch.zeros(0, dtype=torch.bool, device=device),
            groups=G,
            pad_gt=pad,
            attn_mask=attn_mask,
        )

    if generator is None:
        generator = torch.Generator(device="cpu").manual_seed(0)

    def rand(*shape):
        return torch.rand(*shape, generator=generator, dtype=gt_boxes.dtype).to(device)

    anchors = gt_boxes.new_full((n_dn, 4), 0.0)
    anchors[:, :2] = 0.5
    anchors[:, 2:] = 0.1
    label_ids = torch.full((n_dn,), DN_LABEL_PAD, dtype=torch.int64, device=device)
    target_gt = torch.full((n_dn,), -1, dtype=torch.int64, device=device)
    is_positive = torch.zeros(n_dn, dtype=torch.bool, device=device)
    valid = torch.zeros(n_dn, dtype=torch.bool, device=device)

    for g in range(G):
        base = g * 2 * pad
        pos_sl = slice(base, base + n_gt)
        neg_sl = slice(base + pad, base + pad + n_gt)

        pos_mag = (rand(n_gt, 4) * 2 - 1) * cfg.box_noise_scale
        anchors[pos_sl] = _jitter_boxes(gt_boxes, pos_mag)
        span = cfg.neg_noise_scale_max - cfg.box_noise_scale
        neg_abs = cfg.neg_noise_scale_max - rand(n_gt, 4) * span
        neg_sign = torch.where(rand(n_gt, 4) < 0.5, -1.0, 1.0).to(gt_boxes.dtype)
        anchors[neg_sl] = _jitter_boxes(gt_boxes, neg_abs * neg_sign)

        flip = rand(n_gt) < cfg.label_flip_rate
        label_ids[pos_sl] = torch.where(flip, DN_LABEL_FLIPPED, DN_LABEL_HUMAN)
        label_ids[neg_sl] = DN_LABEL_HUMAN
        gt_idx = torch.arange(n_gt, dtype=torch.int64, device=device)
        target_gt[pos_sl] = gt_idx
        target_gt[neg_sl] = gt_idx
        is_positive[pos_sl] = True
        valid[pos_sl] = True
        valid[neg_sl] = True

    return DenoisingGroup(
        anchors=anchors,
        label_ids=label_ids,
        target_gt=target_gt,
        is_positive=is_positive,
        valid=valid,
        groups=G,
        pad_gt=pad,
        attn_mask=attn_mask,
    )
