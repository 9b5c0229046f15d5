"""Simplified parametric 3D body model and gender-based template selection.

The body is a 17-joint kinematic tree matching the 2D keypoint layout, with a
10-component linear shape basis over the rest joints and per-joint axis-angle
rotations applied by forward kinematics. Templates for three genders (bone
lengths differ by a few percent) ship as JSON files in ``templates/``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import torch
from torch import Tensor

from .geom import KEYPOINT_NAMES

NUM_JOINTS = 17
NUM_SHAPE_PARAMS = 10
GENDERS = ("female", "male")

# Parent of each joint; the nose is the kinematic root. Shoulders and hips
# both attach to the root so arm and leg articulation are independent.
PARENTS = (-1, 0, 0, 1, 2, 0, 0, 5, 6, 7, 8, 0, 0, 11, 12, 13, 14)

TEMPLATE_FORMAT_VERSION = 1

_LEFT_ARM = (7, 9)
_RIGHT_ARM = (8, 10)
_LEFT_LEG = (13, 15)
_RIGHT_LEG = (14, 16)


@dataclass
class BodyTemplate:
    """Per-gender rest skeleton: rest joints, parent tree and shape basis."""

    gender: str
    rest_joints: Tensor  # [J, 3] float64
    parents: tuple[int, ...]
    shape_basis: Tensor  # [S, J, 3] float64

    def __post_init__(self):
        J = self.rest_joints.shape[0]
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"parent of joint {j} must precede it, got {p}")
        if self.shape_basis.shape[1:] != (J, 3):
            raise ValueError("shape basis must be [S, J, 3]")
        flat = self.shape_basis.reshape(self.shape_basis.shape[0], -1)
        if torch.linalg.matrix_rank(flat) < flat.shape[0]:
            raise ValueError("shape basis directions must be linearly independent")

    def to_json_dict(self) -> dict:
        return {
            "format_version": TEMPLATE_FORMAT_VERSION,
            "gender": self.gender,
            "joint_names": list(KEYPOINT_NAMES),
            "parents": list(self.parents),
            "rest_joints": self.rest_joints.tolist(),
            "shape_basis": self.shape_basis.tolist(),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "BodyTemplate":
        if d.get("format_version") != TEMPLATE_FORMAT_VERSION:
            raise ValueError(f"unsupported template format {d.get('format_version')!r}")
        return BodyTemplate(
            gender=d["gender"],
            rest_joints=torch.tensor(d["rest_joints"], dtype=torch.float64),
            parents=tuple(d["parents"]),
            shape_basis=torch.tensor(d["shape_basis"], dtype=torch.float64),
        )


def save_template(t: BodyTemplate, path) -> None:
    with open(path, "w") as f:
        json.dump(t.to_json_dict(), f, indent=1)


def load_template(path) -> BodyTemplate:
    with open(path) as f:
        return BodyTemplate.from_json_dict(json.load(f))


def _rest_joints_neutral() -> torch.Tensor:
    # x: subject's left, y: up, z: forward; nose at the origin, ankles ~1.53 below.
    return torch.tensor(
        [
            [0.000, 0.000, 0.000],   # nose
            [0.035, 0.035, 0.020],   # left_eye
            [-0.035, 0.035, 0.020],  # right_eye
            [0.075, 0.015, -0.010],  # left_ear
            [-0.075, 0.015, -0.010],  # right_ear
            [0.190, -0.220, 0.000],  # left_shoulder
            [-0.190, -0.220, 0.000],  # right_shoulder
            [0.230, -0.500, 0.000],  # left_elbow
            [-0.230, -0.500, 0.000],  # right_elbow
            [0.250, -0.760, 0.000],  # left_wrist
            [-0.250, -0.760, 0.000],  # right_wrist
            [0.110, -0.750, 0.000],  # left_hip
            [-0.110, -0.750, 0.000],  # right_hip
            [0.130, -1.150, 0.000],  # left_knee
            [-0.130, -1.150, 0.000],  # right_knee
            [0.140, -1.530, 0.000],  # left_ankle
            [-0.140, -1.530, 0.000],  # right_ankle
        ],
        dtype=torch.float64,
    )


def _offset_subtree(out: Tensor, root: int, delta: Tensor) -> None:
    out[root] += delta
    stack = [c for c in range(NUM_JOINTS) if PARENTS[c] == root]
    while stack:
        c = stack.pop()
        out[c] += delta
        stack.extend(k for k in range(NUM_JOINTS) if PARENTS[k] == c)


def _scale_bones(rest: Tensor, joints: tuple[int, ...], factor: float) -> Tensor:
    """Scale the bones ending at ``joints`` by ``factor``, propagating to children."""
    out = rest.clone()
    for j in joints:
        p = PARENTS[j]
        _offset_subtree(out, j, (factor - 1.0) * (rest[j] - rest[p]))
    return out


def _widen(rest: Tensor, joints: tuple[int, ...], factor: float) -> Tensor:
    """Scale the lateral (x) placement of ``joints``, propagating to children."""
    out = rest.clone()
    for j in joints:
        delta = torch.zeros(3, dtype=rest.dtype)
        delta[0] = (factor - 1.0) * rest[j, 0]
        _offset_subtree(out, j, delta)
    return out


def _shape_basis(rest: Tensor) -> Tensor:
    basis = torch.zeros(NUM_SHAPE_PARAMS, NUM_JOINTS, 3, dtype=torch.float64)
    # 0: overall size
    basis[0] = 0.05 * (rest - rest[0])
    # 1/2: arm and leg length
    for j in _LEFT_ARM + _RIGHT_ARM:
        basis[1, j] = 0.08 * (rest[j] - rest[PARENTS[j]])
    for j in _LEFT_LEG + _RIGHT_LEG:
        basis[2, j] = 0.08 * (rest[j] - rest[PARENTS[j]])
    # 3/4: shoulder and hip width
    for j in (5, 6):
        basis[3, j, 0] = 0.04 * torch.sign(rest[j, 0])
    for j in (11, 12):
        basis[4, j, 0] = 0.03 * torch.sign(rest[j, 0])
    # 5: head size
    for j in (1, 2, 3, 4):
        basis[5, j] = 0.30 * rest[j]
    # 6: torso length (hips move down)
    for j in (11, 12):
        basis[6, j, 1] = -0.05
    # 7: shoulder drop
    for j in (5, 6):
        basis[7, j, 1] = -0.03
    # 8/9: left-right limb asymmetry
    for j in _LEFT_ARM:
        basis[8, j] = 0.05 * (rest[j] - rest[PARENTS[j]])
    for j in _RIGHT_ARM:
        basis[8, j] = -0.05 * (rest[j] - rest[PARENTS[j]])
    for j in _LEFT_LEG:
        basis[9, j] = 0.05 * (rest[j] - rest[PARENTS[j]])
    for j in _RIGHT_LEG:
        basis[9, j] = -0.05 * (rest[j] - rest[PARENTS[j]])
    return basis


def build_template(gender: str) -> BodyTemplate:
    """Construct the built-in template for ``female``, ``male`` or ``neutral``."""
    rest = _rest_joints_neutral()
    limbs = _LEFT_ARM + _RIGHT_ARM + _LEFT_LEG + _RIGHT_LEG
    if gender == "male":
        rest = _scale_bones(rest, limbs, 1.05)
        rest = _widen(rest, (5, 6), 1.10)
    elif gender == "female":
        rest = _scale_bones(rest, limbs, 0.95)
        rest = _widen(rest, (11, 12), 1.15)
    elif gender != "neutral":
        raise ValueError(f"unknown gender {gender!r}")
    return BodyTemplate(gender, rest, PARENTS, _shape_basis(rest))


def default_templates() -> dict[str, BodyTemplate]:
    """Load the three shipped template files, keyed by gender tag."""
    out = {}
    for gender in ("female", "male", "neutral"):
        ref = resources.files("uniperson.templates").joinpath(f"{gender}.json")
        out[gender] = BodyTemplate.from_json_dict(json.loads(ref.read_text()))
    return out


def axis_angle_to_matrix(v: Tensor) -> Tensor:
    """Rodrigues rotation matrices for axis-angle vectors [..., 3]."""
    angle = torch.sqrt((v**2).sum(-1) + 1e-16)
    axis = v / angle[..., None]
    x, y, z = axis.unbind(-1)
    c = torch.cos(angle)
    s = torch.sin(angle)
    C = 1 - c
    row0 = torch.stack([c + x * x * C, x * y * C - z * s, x * z * C + y * s], dim=-1)
    row1 = torch.stack([y * x * C + z * s, c + y * y * C, y * z * C - x * s], dim=-1)
    row2 = torch.stack([z * x * C - y * s, z * y * C + x * s, c + z * z * C], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def joints_from_params(theta: Tensor, beta: Tensor, template: BodyTemplate) -> Tensor:
    """Posed 3D joints from axis-angle pose and shape coefficients.

    ``theta`` is [..., 3*J] (per-joint axis-angle, joint order as in the
    template), ``beta`` is [..., S]. Shape offsets apply to the rest joints,
    then rotations chain from the root down the parent tree. Differentiable
    w.r.t. both parameter sets; output [..., J, 3] in canonical units.
    """
    dtype = theta.dtype
    rest = template.rest_joints.to(dtype)
    basis = template.shape_basis.to(dtype)
    batch = theta.shape[:-1]
    J = rest.shape[0]
    shaped = rest + torch.einsum("...s,sjc->...jc", beta, basis)
    rots = axis_angle_to_matrix(theta.reshape(*batch, J, 3))

    glob_rot: list[Tensor] = [rots[..., 0, :, :]]
    pos: list[Tensor] = [shaped[..., 0, :]]
    for j in range(1, J):
        p = template.parents[j]
        bone = shaped[..., j, :] - shaped[..., p, :]
        pos.append(pos[p] + (glob_rot[p] @ bone[..., None]).squeeze(-1))
        glob_rot.append(glob_rot[p] @ rots[..., j, :, :])
    return torch.stack(pos, dim=-2)


def gams_select(
    gender,
    templates: dict[str, BodyTemplate],
    enabled: bool = True,
) -> BodyTemplate:
    """Pick the body template for a gender label or predicted probability pair.

    Labels select directly (training path); a probability/score pair selects
    by argmax (inference path). Exact ties fall back to neutral. With the
    selector disabled the neutral template is always returned.
    """
    for g in ("female", "male", "neutral"):
        if g not in templates:
            raise KeyError(f"missing body template {g!r}")
    if not enabled:
        return templates["neutral"]
    if isinstance(gender, str):
        if gender not in templates:
            raise KeyError(f"no template for gender {gender!r}")
        return templates[gender]
    pair = [float(x) for x in gender]
    if len(pair) != 2:
        raise ValueError("expected a (female, male) probability pair")
    if pair[0] == pair[1]:
        return templates["neutral"]
    return templates[GENDERS[int(pair[1] > pair[0])]]
