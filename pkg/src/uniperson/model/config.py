"""Network hyperparameters and the small-CPU preset."""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace


@dataclass
class ModelConfig:
    hidden_dim: int = 256
    num_heads: int = 8
    encoder_layers: int = 6
    decoder_layers: int = 6
    num_queries: int = 300
    num_feature_levels: int = 4  # encoder scales, strides 8..64
    num_sampling_points: int = 4
    ffn_ratio: int = 4
    backbone: str = "tiny"
    mask_stride: int = 4  # extra high-resolution scale used by the mask head
    heatmap_stride: int = 8
    num_keypoints: int = 17
    num_body_joints: int = 17
    num_shape_params: int = 10
    num_age_classes: int = 85
    joint_refine_layers: int = 2
    cdn_groups: int = 100
    class_prior_prob: float = 0.05
    with_keypoints: bool = True
    with_segmentation: bool = True
    with_attributes: bool = True
    with_mesh: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.hidden_dim % 4 != 0:
            raise ValueError("hidden_dim must be divisible by 4 (anchor embeddings)")
        if self.num_feature_levels < 1:
            raise ValueError("need at least one feature level")

    @property
    def encoder_strides(self) -> tuple[int, ...]:
        return tuple(8 * 2**i for i in range(self.num_feature_levels))

    def enabled_tasks(self) -> tuple[str, ...]:
        tasks = ["detection"]
        if self.with_keypoints:
            tasks.append("keypoints")
        if self.with_segmentation:
            tasks.append("segmentation")
        if self.with_attributes:
            tasks.append("attributes")
        if self.with_mesh:
            tasks.append("mesh")
        return tuple(tasks)

    def as_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def desk_preset(**overrides) -> ModelConfig:
    """Configuration small enough to train on a few CPU cores in minutes."""
    cfg = ModelConfig(
        hidden_dim=64,
        num_heads=4,
        encoder_layers=2,
        decoder_layers=2,
        num_queries=30,
        num_feature_levels=4,
        cdn_groups=10,
    )
    return replace(cfg, **overrides) if overrides else cfg
