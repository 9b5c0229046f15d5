"""Training objectives and their weighted combination.

All losses are plain differentiable functions over torch tensors; the trainer
composes them inside one autograd graph per step. Normalization conventions
(documented per function) are: classification terms are divided by the number
of matched instances, keypoint terms by the number of visible keypoints, and
mask terms by pixel count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch import Tensor

from . import geom


class NonFiniteLossError(RuntimeError):
    """A loss component came out NaN/inf; the offending component is named."""


@dataclass
class LossWeights:
    """Scalar multipliers of the fifteen sub-task objectives."""

    cls_focal: float = 1.0
    det_reg: float = 5.0
    det_giou: float = 2.0
    kpt_focal: float = 1.0
    kpt_reg: float = 50.0
    kpt_oks: float = 1.5
    kpt_hm: float = 4.0
    pose_reg: float = 5.0
    shape_reg: float = 10.0
    joints3d_reg: float = 10.0
    seg_bce: float = 8.0
    seg_dice: float = 5.0
    gender_bce: float = 1.0
    age_mean: float = 0.002
    age_var: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# Weight lookup for each named component; CDN components reuse detection weights.
COMPONENT_WEIGHT_KEY = {
    "cls_focal": "cls_focal",
    "det_reg": "det_reg",
    "det_giou": "det_giou",
    "kpt_focal": "kpt_focal",
    "kpt_reg": "kpt_reg",
    "kpt_oks": "kpt_oks",
    "kpt_hm": "kpt_hm",
    "pose_reg": "pose_reg",
    "shape_reg": "shape_reg",
    "joints3d_reg": "joints3d_reg",
    "seg_bce": "seg_bce",
    "seg_dice": "seg_dice",
    "gender_bce": "gender_bce",
    "age_mean": "age_mean",
    "age_var": "age_var",
    "dn_cls_focal": "cls_focal",
    "dn_det_reg": "det_reg",
    "dn_det_giou": "det_giou",
}


@dataclass
class LossReport:
    """Named unweighted components plus their weighted total."""

    components: dict[str, float]
    weights: dict[str, float]
    total: float
    empty_batch: bool = False

    def validate(self, rel_tol: float = 1e-6):
        expect = sum(self.weights[k] * v for k, v in self.components.items())
        scale = max(abs(expect), 1.0)
        if abs(expect - self.total) > rel_tol * scale:
            raise NonFiniteLossError(
                f"total {self.total} does not match weighted component sum {expect}"
            )

    def as_dict(self) -> dict:
        return {"total": self.total, **self.components}


def focal_loss(
    logits: Tensor,
    targets: Tensor,
    alpha: float | None = 0.25,
    gamma: float = 2.0,
    normalization: str = "count",
    count: float | None = None,
) -> Tensor:
    """Binary focal loss over sigmoid logits.

    ``targets`` holds {0, 1} class indices. With ``alpha=None`` and ``gamma=0``
    this reduces exactly to binary cross-entropy. ``normalization`` is one of
    ``count`` (divide by ``count``, typically the number of matched instances),
    ``mean`` or ``sum``. An empty batch is defined as loss 0 (with a warning).
    """
    if logits.numel() == 0:
        warnings.warn("focal_loss on an empty batch, returning 0", stacklevel=2)
        return logits.sum() * 0.0
    t = targets.to(logits.dtype)
    # softplus-based -log p / -log(1-p) keeps extreme logits finite
    log_p = -F.softplus(-logits)
    log_q = -F.softplus(logits)
    p = torch.sigmoid(logits)
    loss_pos = -((1 - p) ** gamma) * log_p
    loss_neg = -(p**gamma) * log_q
    if alpha is not None:
        loss_pos = alpha * loss_pos
        loss_neg = (1 - alpha) * loss_neg
    loss = t * loss_pos + (1 - t) * loss_neg
    if normalization == "mean":
        return loss.mean()
    if normalization == "sum":
        return loss.sum()
    if normalization == "count":
        if count is None:
            raise ValueError("normalization='count' requires count")
        return loss.sum() / max(count, 1.0)
    raise ValueError(f"unknown normalization {normalization!r}")


def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute difference between equally-shaped tensors."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return (pred - gt).abs().mean()


def giou_loss(pred_xyxy: Tensor, gt_xyxy: Tensor) -> Tensor:
    """1 - GIoU, averaged over box pairs; range [0, 2]."""
    _, g = geom.iou_giou(pred_xyxy, gt_xyxy)
    return (1.0 - g).mean()


def oks_loss(pred: Tensor, gt: Tensor, area, sigmas=geom.KEYPOINT_SIGMAS) -> Tensor:
    """1 - OKS for a single instance (visibility >= 1 keypoints count)."""
    return 1.0 - geom.oks(pred, gt, area, sigmas=sigmas, vis_threshold=1)


def render_heatmaps(
    keypoints: Tensor, height: int, width: int, sigma_px: float = 2.0
) -> tuple[Tensor, Tensor]:
    """Gaussian target maps for [G, K, 3] normalized keypoints.

    Returns ([K, H, W] targets, [K] bool channel-has-visible). Peaks are 1 at
    the keypoint; overlapping instances combine by maximum. Pixel (i, j) is
    centered at ((j+0.5)/W, (i+0.5)/H) in normalized coordinates.
    """
    K = keypoints.shape[1]
    dtype = keypoints.dtype
    device = keypoints.device
    ys = (torch.arange(height, dtype=dtype, device=device) + 0.5) / height
    xs = (torch.arange(width, dtype=dtype, device=device) + 0.5) / width
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    target = torch.zeros(K, height, width, dtype=dtype, device=device)
    has_vis = torch.zeros(K, dtype=torch.bool, device=device)
    sx = sigma_px / width
    sy = sigma_px / height
    for g in range(keypoints.shape[0]):
        for k in range(K):
            x, y, v = keypoints[g, k]
            if v < 1:
                continue
            has_vis[k] = True
            blob = torch.exp(-(((gx - x) / sx) ** 2 + ((gy - y) / sy) ** 2) / 2.0)
            target[k] = torch.maximum(target[k], blob)
    return target, has_vis


def heatmap_loss(
    pred_heatmaps: Tensor, gt_keypoints: Tensor, sigma_px: float = 2.0
) -> Tensor:
    """Auxiliary keypoint heatmap loss for one image.

    Per keypoint channel that has at least one visible annotation, the
    pixelwise mean squared error against the rendered Gaussian target;
    averaged over those channels. No visible keypoints -> 0.
    """
    K, H, W = pred_heatmaps.shape
    target, has_vis = render_heatmaps(gt_keypoints, H, W, sigma_px)
    if not bool(has_vis.any()):
        return pred_heatmaps.sum() * 0.0
    per_channel = ((pred_heatmaps - target) ** 2).mean(dim=(1, 2))
    return per_channel[has_vis].mean()


def mask_losses(pred_logits: Tensor, gt: Tensor, eps: float = 0.0) -> tuple[Tensor, Tensor]:
    """(binary cross-entropy, dice) between mask logits and a {0,1} target.

    BCE is the per-pixel mean; dice is 1 - 2|P.G| / (|P| + |G|) on soft
    probabilities. The ground-truth mask must be nonempty (callers reject
    empty annotations upstream); ``eps`` optionally smooths the dice ratio
    for subsampled-point costs.
    """
    if pred_logits.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred_logits.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(pred_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(pred_logits, gt)
    p = torch.sigmoid(pred_logits)
    inter = (p * gt).sum()
    denom = p.sum() + gt.sum()
    dice = 1.0 - (2.0 * inter + eps) / (denom + eps)
    return bce, dice


def age_expected_value(dist: Tensor, tol: float = 1e-6) -> Tensor:
    """Expectation of an age distribution over classes 1..len(dist)."""
    s = dist.sum(-1)
    if not bool(((s - 1.0).abs() <= tol).all()):
        raise ValueError("age distribution must sum to 1")
    k = torch.arange(1, dist.shape[-1] + 1, dtype=dist.dtype, device=dist.device)
    return (dist * k).sum(-1)


def age_mean_variance_loss(dist: Tensor, gt_age: float | Tensor) -> tuple[Tensor, Tensor]:
    """Mean-variance objective on a normalized age distribution.

    mean term: (E[k] - gt)^2 / 2; variance term: Var[k] of the distribution
    itself (independent of the label).
    """
    n = dist.shape[-1]
    gt = torch.as_tensor(gt_age, dtype=dist.dtype, device=dist.device)
    if bool((gt < 1).any()) or bool((gt > n).any()):
        raise ValueError(f"ground-truth age outside [1, {n}]")
    k = torch.arange(1, n + 1, dtype=dist.dtype, device=dist.device)
    mean = (dist * k).sum(-1)
    var = (dist * k**2).sum(-1) - mean**2
    mean_loss = 0.5 * (mean - gt) ** 2
    return mean_loss.mean(), var.mean()


def total_loss(components: dict[str, Tensor], w: LossWeights) -> tuple[Tensor, LossReport]:
    """Weighted sum of named sub-losses.

    ``components`` may omit disabled tasks (they contribute 0). Unknown names
    are rejected; a non-finite component aborts with its name.
    """
    weights_used: dict[str, float] = {}
    floats: dict[str, float] = {}
    total = None
    for name, value in components.items():
        if name not in COMPONENT_WEIGHT_KEY:
            raise KeyError(f"unknown loss component {name!r}")
        v = float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(f"loss component {name!r} is non-finite ({v})")
        lam = getattr(w, COMPONENT_WEIGHT_KEY[name])
        weights_used[name] = lam
        floats[name] = v
        term = lam * value
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    report = LossReport(
        components=floats,
        weights=weights_used,
        total=float(total),
        empty_batch=not components,
    )
    report.validate()
    return total, report
