"""Tiny four-stage convolutional backbone and the top-down feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compute import Tensor, conv2d, parameter, relu, upsample_nearest2x

STAGE_CHANNELS = (16, 32, 64, 128)
STAGE_STRIDES = (4, 8, 16, 32)
PYRAMID_CHANNELS = 32


def kaiming_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int, name: str, gain: float = 2.0) -> Tensor:
    """He-normal weights; ``gain=2`` suits a following ReLU, ``gain=1`` a linear layer."""
    std = np.sqrt(gain / (in_ch * k * k))
    return parameter(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)), name=name)


def zeros(shape, name: str) -> Tensor:
    return parameter(np.zeros(shape), name=name)


class ParamGroup:
    """Named parameter container; subclasses register tensors in ``self.params``."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add_conv(self, rng, name: str, out_ch: int, in_ch: int, k: int, gain: float = 2.0) -> None:
        self.params[f"{name}.w"] = kaiming_conv(rng, out_ch, in_ch, k, f"{name}.w", gain)
        self.params[f"{name}.b"] = zeros(out_ch, f"{name}.b")

    def add_linear(self, rng, name: str, out_f: int, in_f: int, gain: float = 2.0) -> None:
        std = np.sqrt(gain / in_f)
        self.params[f"{name}.w"] = parameter(rng.normal(0.0, std, size=(out_f, in_f)), name=f"{name}.w")
        self.params[f"{name}.b"] = zeros(out_f, f"{name}.b")

    def conv(self, name: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride, padding=padding)


@dataclass
class FeatureHierarchy:
    """Backbone outputs C1..C4 at strides 4, 8, 16, 32."""

    c_maps: list[Tensor]


@dataclass
class FeaturePyramid:
    """P1..P4 (all ``PYRAMID_CHANNELS`` wide) plus P5 = conv1(C4)."""

    p_maps: list[Tensor]
    p5: Tensor


class Backbone(ParamGroup):
    """Four stages of 3x3 convs; stage 1 reaches stride 4 with two stride-2 convs."""

    def __init__(self, rng: np.random.Generator, in_channels: int = 1):
        super().__init__()
        self.layers: list[tuple[int, str, int]] = []
        prev = in_channels
        for s, ch in enumerate(STAGE_CHANNELS, start=1):
            strides = (2, 2, 1) if s == 1 else (2, 1)
            for j, stride in enumerate(strides):
                name = f"backbone.s{s}.conv{j}"
                self.add_conv(rng, name, ch, prev, 3)
                self.layers.append((s, name, stride))
                prev = ch

    def forward(self, image: Tensor) -> FeatureHierarchy:
        if image.ndim != 4:
            raise ValueError(f"backbone expects N x C x H x W, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"image dims {h}x{w} must be divisible by 32")
        x = image
        c_maps = []
        for s in range(1, 5):
            for stage, name, stride in self.layers:
                if stage == s:
                    x = relu(self.conv(name, x, stride=stride, padding=1))
            c_maps.append(x)
        return FeatureHierarchy(c_maps)


class FPN(ParamGroup):
    """Top-down pyramid: P_i = conv3(upsample(P_{i+1}) + conv1(C_i)), P5 = conv1(C4).

    P5 already has C4's resolution, so the level-4 merge uses it without upsampling.
    """

    def __init__(self, rng: np.random.Generator, d: int = PYRAMID_CHANNELS):
        super().__init__()
        self.d = d
        # no nonlinearity inside the pyramid, so unit-gain init keeps the cascade from inflating
        for i, ch in enumerate(STAGE_CHANNELS, start=1):
            self.add_conv(rng, f"fpn.lateral{i}", d, ch, 1, gain=1.0)
            self.add_conv(rng, f"fpn.smooth{i}", d, d, 3, gain=1.0)
        self.add_conv(rng, "fpn.top", d, STAGE_CHANNELS[-1], 1, gain=1.0)

    def forward(self, h: FeatureHierarchy) -> FeaturePyramid:
        p5 = self.conv("fpn.top", h.c_maps[3])
        p_maps: list[Tensor] = [None] * 4  # type: ignore[list-item]
        above = p5
        for i in range(4, 0, -1):
            lateral = self.conv(f"fpn.lateral{i}", h.c_maps[i - 1])
            top = above if i == 4 else upsample_nearest2x(above)
            p_maps[i - 1] = self.conv(f"fpn.smooth{i}", top + lateral, padding=1)
            above = p_maps[i - 1]
        return FeaturePyramid(p_maps, p5)


def backbone_forward(backbone: Backbone, image: Tensor) -> FeatureHierarchy:
    return backbone.forward(image)


def build_pyramid(fpn: FPN, hierarchy: FeatureHierarchy) -> FeaturePyramid:
    return fpn.forward(hierarchy)
