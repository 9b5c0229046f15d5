"""Image backbones producing a stride-4/8/16/32 feature pyramid.

The built-in backbone is a small GroupNorm CNN meant for CPU training.
Alternatives register under a name and must declare their output channels;
the contract is validated when the model is built.
"""

from __future__ import annotations

import torch.nn as nn
from torch import Tensor

BACKBONE_STRIDES = (4, 8, 16, 32)

_REGISTRY: dict[str, type] = {}


def register_backbone(name: str):
    def deco(cls):
        if not isinstance(getattr(cls, "out_channels", None), (tuple, list)) or len(
            cls.out_channels
        ) != len(BACKBONE_STRIDES):
            raise TypeError(
                f"backbone {name!r} must declare out_channels for strides {BACKBONE_STRIDES}"
            )
        _REGISTRY[name] = cls
        return cls

    return deco


def build_backbone(name: str) -> nn.Module:
    if name not in _REGISTRY:
        raise KeyError(f"unknown backbone {name!r}; registered: {sorted(_REGISTRY)}")
    return _REGISTRY[name]()


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


@register_backbone("tiny")
class TinyBackbone(nn.Module):
    """Four conv stages (channels 32/64/128/256) at strides 4/8/16/32."""

    out_channels = (32, 64, 128, 256)

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1, bias=False),
            nn.GroupNorm(8, 32),
            nn.ReLU(inplace=True),
        )
        self.stage1 = _conv_block(32, 32, stride=2)  # stride 4
        self.stage2 = _conv_block(32, 64, stride=2)  # stride 8
        self.stage3 = _conv_block(64, 128, stride=2)  # stride 16
        self.stage4 = _conv_block(128, 256, stride=2)  # stride 32

    def forward(self, x: Tensor) -> list[Tensor]:
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ValueError("backbone input sides must be divisible by 32 (pad upstream)")
        c1 = self.stage1(self.stem(x))
        c2 = self.stage2(c1)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        return [c1, c2, c3, c4]


def validate_feature_contract(feats: list[Tensor], backbone: nn.Module, input_hw) -> None:
    h, w = input_hw
    declared = tuple(backbone.out_channels)
    for f, stride, ch in zip(feats, BACKBONE_STRIDES, declared):
        if f.shape[1] != ch:
            raise ValueError(
                f"backbone emitted {f.shape[1]} channels at stride {stride}, declared {ch}"
            )
        if f.shape[-2] != h // stride or f.shape[-1] != w // stride:
            raise ValueError(f"backbone spatial size wrong at stride {stride}")
