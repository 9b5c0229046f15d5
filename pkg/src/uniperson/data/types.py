"""Annotation containers and the cross-field consistency checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geom import Box

# Size-class thresholds on normalized area (mask pixels / image pixels),
# equal to the usual 32^2 / 96^2 pixel-area thresholds at 640x640 reference
# resolution; being normalized they scale with the working resolution.
SIZE_SMALL_MAX = (32.0 / 640.0) ** 2
SIZE_MEDIUM_MAX = (96.0 / 640.0) ** 2

# Left/right keypoint index pairs of the 17-keypoint layout, used by
# horizontal flips.
FLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))


@dataclass
class Instance:
    """Ground truth for one person."""

    box: Box
    keypoints: np.ndarray  # [17, 3] normalized (x, y, v), v in {0,1,2}
    mask: np.ndarray | None  # [H, W] bool at image resolution
    gender: str = "female"
    age: int = 30
    pose_params: np.ndarray | None = None  # [51] axis-angle radians
    shape_params: np.ndarray | None = None  # [10]
    joints3d: np.ndarray | None = None  # [17, 3] canonical units (derived)
    has_keypoints: bool = True
    has_mask: bool = True
    has_attributes: bool = True
    has_mesh: bool = True
    track_id: int | None = None

    def norm_area(self) -> float:
        """Normalized instance area: mask support if present, else box area."""
        if self.mask is not None and self.has_mask:
            h, w = self.mask.shape
            return float(self.mask.sum()) / (h * w)
        return self.box.w * self.box.h

    def size_class(self) -> str:
        a = self.norm_area()
        if a <= SIZE_SMALL_MAX:
            return "small"
        if a <= SIZE_MEDIUM_MAX:
            return "medium"
        return "large"


@dataclass
class RenderInfo:
    """Generator provenance: the orthographic transform used to draw an instance.

    pixel = offset + scale * (x, -y) for canonical body coordinates (x, y).
    """

    scale: float
    offset: tuple[float, float]


@dataclass
class SceneSample:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    instances: list[Instance]
    scene_id: int = 0
    sequence_id: int | None = None
    frame_index: int | None = None
    render_info: list[RenderInfo] | None = field(default=None, repr=False)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def check_sample(sample: SceneSample, dilate_px: int = 2) -> list[str]:
    """Cross-field consistency audit; returns a list of violations (empty = ok)."""
    problems: list[str] = []
    H, W = sample.image.shape[:2]
    for n, inst in enumerate(sample.instances):
        b = inst.box
        x1, y1, x2, y2 = b.corners()
        if not (0 <= b.cx <= 1 and 0 <= b.cy <= 1 and b.w > 0 and b.h > 0):
            problems.append(f"instance {n}: invalid box {b}")
        if not 1 <= inst.age <= 85:
            problems.append(f"instance {n}: age {inst.age} outside [1, 85]")
        if inst.gender not in ("female", "male"):
            problems.append(f"instance {n}: unknown gender {inst.gender!r}")

        if inst.mask is not None:
            if inst.mask.shape != (H, W):
                problems.append(f"instance {n}: mask resolution mismatch")
                continue
            if inst.has_mask and inst.mask.sum() == 0:
                problems.append(f"instance {n}: empty mask")
            ys, xs = np.nonzero(inst.mask)
            if len(ys):
                pad_x = dilate_px / W
                pad_y = dilate_px / H
                if (
                    xs.min() / W < x1 - pad_x
                    or (xs.max() + 1) / W > x2 + pad_x
                    or ys.min() / H < y1 - pad_y
                    or (ys.max() + 1) / H > y2 + pad_y
                ):
                    problems.append(f"instance {n}: mask outside dilated box")

        vis = inst.keypoints[:, 2] >= 2
        for k in np.nonzero(vis)[0]:
            x, y = inst.keypoints[k, 0], inst.keypoints[k, 1]
            if not (0 <= x < 1 + 1e-9 and 0 <= y < 1 + 1e-9):
                problems.append(f"instance {n}: visible keypoint {k} outside image")
                continue
            if inst.mask is not None:
                px = min(int(x * W), W - 1)
                py = min(int(y * H), H - 1)
                if not inst.mask[py, px]:
                    problems.append(f"instance {n}: visible keypoint {k} not on mask")
        if inst.has_keypoints and not (inst.keypoints[:, 2] >= 1).any():
            problems.append(f"instance {n}: keypoint task enabled without labels")
    return problems
