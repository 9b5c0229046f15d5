"""Geometric primitives shared by losses, matching, data generation and evaluation.

Boxes live in normalized image coordinates and are handled as tensors of shape
``[..., 4]`` in either ``cxcywh`` (center) or ``xyxy`` (corner) parametrization.
Keypoint similarity (OKS), mask overlap and 3D similarity alignment (Procrustes)
are implemented on torch tensors so the same code serves both differentiable
losses and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

# Per-keypoint falloff constants of the standard 17-keypoint person skeleton
# (nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles).
KEYPOINT_SIGMAS = (
    0.026, 0.025, 0.025, 0.035, 0.035,
    0.079, 0.079, 0.072, 0.072, 0.062, 0.062,
    0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)

KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)


class DegenerateGeometryError(ValueError):
    """Raised for inputs on which the requested geometric quantity is undefined."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, center parametrization, normalized to [0, 1].

    Degenerate extents are rejected at construction so that downstream
    matching costs stay finite.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateGeometryError(
                f"box extents must be positive, got w={self.w}, h={self.h}"
            )

    def to_tensor(self) -> Tensor:
        return torch.tensor([self.cx, self.cy, self.w, self.h], dtype=torch.float64)

    @staticmethod
    def from_tensor(t) -> "Box":
        cx, cy, w, h = (float(v) for v in t)
        return Box(cx, cy, w, h)

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )


def box_cxcywh_to_xyxy(boxes: Tensor, validate: bool = True) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    if validate and boxes.numel() and not bool((w > 0).all() and (h > 0).all()):
        raise DegenerateGeometryError("non-positive box extent")
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def box_xyxy_to_cxcywh(boxes: Tensor, validate: bool = True) -> Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    if validate and boxes.numel() and not bool((x2 > x1).all() and (y2 > y1).all()):
        raise DegenerateGeometryError("non-positive box extent")
    return torch.stack(((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1), dim=-1)


def iou_giou(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """IoU and generalized IoU of broadcastable ``xyxy`` boxes.

    GIoU subtracts the relative slack of the smallest enclosing box from the
    IoU, so it ranges over [-1, 1] and equals the IoU exactly when the
    enclosing box coincides with the union.
    """
    ax1, ay1, ax2, ay2 = a.unbind(-1)
    bx1, by1, bx2, by2 = b.unbind(-1)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)

    iw = (torch.minimum(ax2, bx2) - torch.maximum(ax1, bx1)).clamp(min=0)
    ih = (torch.minimum(ay2, by2) - torch.maximum(ay1, by1)).clamp(min=0)
    inter = iw * ih
    union = area_a + area_b - inter
    iou = inter / union

    ew = torch.maximum(ax2, bx2) - torch.minimum(ax1, bx1)
    eh = torch.maximum(ay2, by2) - torch.minimum(ay1, by1)
    enclose = ew * eh
    giou = iou - (enclose - union) / enclose
    return iou, giou


def pairwise_iou_giou(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """All-pairs IoU/GIoU between ``a`` [N, 4] and ``b`` [M, 4] in xyxy."""
    return iou_giou(a[:, None, :], b[None, :, :])


def oks(
    pred: Tensor,
    gt: Tensor,
    area: float | Tensor,
    sigmas=KEYPOINT_SIGMAS,
    vis_threshold: int = 1,
) -> Tensor:
    """Object keypoint similarity between one prediction and one annotation.

    ``pred`` is [K, 2] (extra columns ignored), ``gt`` is [K, 3] with a
    visibility flag in the last column. The score is the mean, over keypoints
    with visibility >= ``vis_threshold``, of exp(-d^2 / (2 * area * (2*sigma)^2)).

    Raises ``DegenerateGeometryError`` when no keypoint passes the visibility
    threshold: the similarity is undefined rather than 0 in that case.
    """
    if not torch.is_tensor(area):
        area = torch.as_tensor(area, dtype=gt.dtype)
    if float(area) <= 0:
        raise DegenerateGeometryError("OKS requires a positive instance area")
    vis = gt[:, 2] >= vis_threshold
    if not bool(vis.any()):
        raise DegenerateGeometryError("OKS undefined without visible keypoints")
    sig = torch.as_tensor(sigmas, dtype=gt.dtype, device=gt.device)
    d2 = ((pred[:, :2] - gt[:, :2]) ** 2).sum(-1)
    e = d2 / (2.0 * area * (2.0 * sig) ** 2)
    return torch.exp(-e[vis]).mean()


def pairwise_oks(
    pred: Tensor,
    gt: Tensor,
    gt_vis: Tensor,
    areas: Tensor,
    sigmas=KEYPOINT_SIGMAS,
) -> Tensor:
    """OKS matrix between ``pred`` [N, K, 2] and ``gt`` [M, K, 2].

    ``gt_vis`` [M, K] is a boolean mask of the keypoints that count; columns
    whose mask is empty are returned as 0 (callers ignore such annotations).
    ``areas`` [M] are the per-annotation normalization areas.
    """
    sig = torch.as_tensor(sigmas, dtype=pred.dtype, device=pred.device)
    d2 = ((pred[:, None, :, :2] - gt[None, :, :, :2]) ** 2).sum(-1)  # [N, M, K]
    e = d2 / (2.0 * areas[None, :, None] * (2.0 * sig) ** 2)
    sim = torch.exp(-e) * gt_vis[None, :, :]
    counts = gt_vis.sum(-1).clamp(min=1)
    return sim.sum(-1) / counts[None, :]


def mask_iou(a: Tensor, b: Tensor) -> Tensor:
    """IoU between boolean masks ``a`` [N, H, W] and ``b`` [M, H, W]."""
    af = a.reshape(a.shape[0], -1).to(torch.float64)
    bf = b.reshape(b.shape[0], -1).to(torch.float64)
    inter = af @ bf.T
    union = af.sum(-1)[:, None] + bf.sum(-1)[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def procrustes_align(X: Tensor, Y: Tensor) -> Tensor:
    """Align point cloud ``X`` [J, 3] to ``Y`` by the optimal similarity transform.

    Returns s*R@X + t minimizing the Frobenius distance to Y, with the
    rotation constrained to det(R) = +1 (reflections are not allowed, the
    usual convention for Procrustes-aligned joint error).
    """
    if X.shape != Y.shape or X.shape[-1] != 3 or X.shape[0] < 3:
        raise DegenerateGeometryError(f"need matching [J>=3, 3] clouds, got {tuple(X.shape)}")
    dtype = X.dtype
    X64 = X.to(torch.float64)
    Y64 = Y.to(torch.float64)
    mu_x = X64.mean(0)
    mu_y = Y64.mean(0)
    X0 = X64 - mu_x
    Y0 = Y64 - mu_y
    var_x = (X0**2).sum() / X0.shape[0]

    cov = Y0.T @ X0 / X0.shape[0]
    U, S, Vh = torch.linalg.svd(cov)
    # Collinear or coincident points leave the rotation underdetermined.
    if var_x < 1e-18 or float(S[1]) < 1e-12 * max(float(S[0]), 1e-300):
        raise DegenerateGeometryError("rank-deficient point cloud, alignment undefined")
    d = torch.sign(torch.det(U @ Vh))
    D = torch.diag(torch.tensor([1.0, 1.0, float(d)], dtype=torch.float64))
    R = U @ D @ Vh
    s = (S * D.diagonal()).sum() / var_x
    t = mu_y - s * (R @ mu_x)
    return (s * (R @ X64.T).T + t).to(dtype)
